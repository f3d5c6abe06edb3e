"""Buildable and trainable model family around windowed attention.

Three families share one block layout (pre-norm attention and MLP, each with
a residual connection; global average pool, final norm, linear classifier):

* ``dinat`` — hierarchical, 4 levels: a stem of two 3x3 stride-2 convolutions
  (quarter resolution), one 3x3 stride-2 convolution between levels halving
  the extent and doubling channels;
* ``dinat_s`` — architecture twin with a 4x4 non-overlapping patch embedding
  and 2x2 non-overlapping patch-merge downsamplers;
* ``isotropic`` — one level at fixed resolution behind a single 16x16 patch
  embedding, with an explicit per-layer order over {NA, DiNA, SA}.

Within hierarchical levels, layers alternate NA / DiNA starting with NA.
The NA/DiNA labels are descriptive: execution is governed by each layer's
dilation value alone (delta == 1 is plain NA), which is what lets dilation
schedules change at evaluation time without touching weights.  SA layers are
computationally distinct (unrestricted attention with offset-clamped biases).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import attention
from .attention import AttentionLayerState
from .errors import ArchiveError, ArgumentError, ConfigError, DimensionError
from .neighborhood import NeighborhoodSpec, max_dilation
from .prng import SplitMix64
from .tensorops import (
    conv2d, conv2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward,
    linear, linear_backward,
)

FAMILIES = ("dinat", "dinat_s", "isotropic")
LAYER_KINDS = ("NA", "DiNA", "SA")
ISO_PATCH = 16
ARCHIVE_EXTENSION = ".dnw"

_CONFIG_FIELDS = ("family", "depths", "dims", "heads", "mlp_ratio", "kernel", "dilations", "classes", "layer_order")


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ModelConfig:
    family: str
    depths: tuple[int, ...]
    dims: tuple[int, ...]
    heads: tuple[int, ...]
    mlp_ratio: tuple[float, ...]
    kernel: int
    dilations: tuple[int, ...]
    classes: int
    layer_order: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        ratios = self.mlp_ratio if isinstance(self.mlp_ratio, (tuple, list)) else [self.mlp_ratio] * len(self.depths)
        object.__setattr__(self, "mlp_ratio", tuple(float(r) for r in ratios))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.layer_order is not None:
            object.__setattr__(self, "layer_order", tuple(str(k) for k in self.layer_order))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        levels = len(self.depths)
        if not (len(self.dims) == len(self.heads) == len(self.mlp_ratio) == levels) or levels == 0:
            raise ConfigError("depths, dims, heads, and mlp_ratio must have equal, non-zero length")
        if self.family in ("dinat", "dinat_s"):
            if levels != 4:
                raise ConfigError(f"hierarchical families need exactly 4 levels, got {levels}")
            for a, b in zip(self.dims, self.dims[1:]):
                if b != 2 * a:
                    raise ConfigError(f"hierarchical dims must double per level, got {self.dims}")
            if self.family == "dinat" and self.dims[0] % 2:
                raise ConfigError(f"dinat stem halves the first width; dims[0] must be even, got {self.dims[0]}")
        else:
            if levels != 1:
                raise ConfigError(f"isotropic models are single-level, got {levels} levels")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be positive, got {self.depths}")
        if any(d < 1 or d % h_ for d, h_ in zip(self.dims, self.heads)) or any(h_ < 1 for h_ in self.heads):
            raise ConfigError(f"each dim must be a positive multiple of its head count, got {self.dims} / {self.heads}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(
                f"kernel must be odd (even-sized windows have no center and break window symmetry), got {self.kernel}"
            )
        if len(self.dilations) != self.total_depth:
            raise ConfigError(f"need one dilation per layer ({self.total_depth}), got {len(self.dilations)}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")
        if self.layer_order is not None:
            if self.family != "isotropic":
                raise ConfigError("layer_order is only meaningful for isotropic models")
            if len(self.layer_order) != self.total_depth:
                raise ConfigError(f"layer_order needs {self.total_depth} entries, got {len(self.layer_order)}")
            bad = [k for k in self.layer_order if k not in LAYER_KINDS]
            if bad:
                raise ConfigError(f"unknown layer kinds {bad}; expected {LAYER_KINDS}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")

    @property
    def total_depth(self) -> int:
        return sum(self.depths)

    def layer_kinds(self) -> tuple[str, ...]:
        """Per-layer kinds; hierarchical levels alternate NA/DiNA starting NA."""
        if self.layer_order is not None:
            return self.layer_order
        kinds = []
        for depth in self.depths:
            kinds.extend("NA" if t % 2 == 0 else "DiNA" for t in range(depth))
        return tuple(kinds)

    def level_dilations(self) -> tuple[tuple[int, ...], ...]:
        out, pos = [], 0
        for depth in self.depths:
            out.append(self.dilations[pos : pos + depth])
            pos += depth
        return tuple(out)

    def to_json(self) -> str:
        payload = {
            "family": self.family,
            "depths": list(self.depths),
            "dims": list(self.dims),
            "heads": list(self.heads),
            "mlp_ratio": list(self.mlp_ratio),
            "kernel": self.kernel,
            "dilations": list(self.dilations),
            "classes": self.classes,
            "layer_order": list(self.layer_order) if self.layer_order is not None else None,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        unknown = sorted(set(payload) - set(_CONFIG_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; expected a subset of {list(_CONFIG_FIELDS)}")
        missing = [k for k in _CONFIG_FIELDS if k != "layer_order" and k not in payload]
        if missing:
            raise ConfigError(f"config is missing keys {missing}")
        return cls(**payload)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(payload)


# ---------------------------------------------------------------------------
# Dilation schedules

_GRADUAL_L3_COCO = (1, 3, 1, 5, 1, 7)
_GRADUAL_L3_ADE = (1, 2, 1, 3, 1, 4)

# Per-level per-layer dilation lists for the published configurations.
_SCHEDULES: dict[tuple[str, str], tuple[tuple[int, ...], ...]] = {
    ("dinat-m", "imagenet-224"): ((1, 8, 1), (1, 4, 1, 4), (1, 2, 1, 2, 1, 2), (1, 1, 1, 1, 1)),
    ("dinat-t", "imagenet-224"): ((1, 8, 1), (1, 4, 1, 4), (1, 2) * 9, (1, 1, 1, 1, 1)),
    ("dinat-l", "imagenet-384"): ((1, 13, 1), (1, 6, 1, 6), (1, 3) * 9, (1, 1, 1, 1, 1)),
    ("dinat-m", "coco-800"): ((1, 28, 1), (1, 7, 1, 14), _GRADUAL_L3_COCO, (1, 3, 1, 3, 1)),
    ("dinat-t", "coco-800"): ((1, 28, 1), (1, 7, 1, 14), _GRADUAL_L3_COCO * 3, (1, 3, 1, 3, 1)),
    ("dinat-m", "ade-512"): ((1, 16, 1), (1, 4, 1, 8), _GRADUAL_L3_ADE, (1, 2, 1, 2, 1)),
    ("dinat-t", "ade-512"): ((1, 16, 1), (1, 4, 1, 8), _GRADUAL_L3_ADE * 3, (1, 2, 1, 2, 1)),
    ("dinat-l", "ade-640"): (
        (1, 20, 1), (1, 5, 1, 10),
        (1, 2, 1, 3, 1, 4, 1, 5, 1, 2, 1, 3, 1, 4, 1, 5, 1, 5), (1, 2, 1, 2, 1),
    ),
    ("dinat_s-t", "imagenet-224"): ((1, 8), (1, 4), (1, 2, 1, 2, 1, 2), (1, 1)),
    ("dinat_s-s", "imagenet-224"): ((1, 8), (1, 4), (1, 2) * 9, (1, 1)),
    ("dinat_s-l", "imagenet-384"): ((1, 13), (1, 6), (1, 3) * 9, (1, 1)),
    ("dinat_s-t", "coco-800"): ((1, 28), (1, 14), _GRADUAL_L3_COCO, (1, 3)),
    ("dinat_s-s", "coco-800"): ((1, 28), (1, 14), _GRADUAL_L3_COCO * 3, (1, 3)),
    ("dinat_s-t", "ade-512"): ((1, 16), (1, 8), _GRADUAL_L3_ADE, (1, 2)),
    ("dinat_s-s", "ade-512"): ((1, 16), (1, 8), _GRADUAL_L3_ADE * 3, (1, 2)),
    ("dinat_s-l", "ade-640"): (
        (1, 20), (1, 10),
        (1, 2, 1, 3, 1, 4, 1, 5, 1, 2, 1, 3, 1, 4, 1, 5, 1, 5), (1, 2),
    ),
}

# Variants sharing another variant's schedule (same depths).
_SCHEDULE_ALIASES = {
    "dinat-s": "dinat-t", "dinat-b": "dinat-t", "dinat-l": "dinat-t",
    "dinat_s-b": "dinat_s-s", "dinat_s-l": "dinat_s-s",
}


def dilation_schedule(preset: str, task_resolution: str) -> tuple[tuple[int, ...], ...]:
    """Per-level per-layer dilation lists for a published (variant, task) pair."""
    name = preset.lower()
    key = (name, task_resolution.lower())
    if key not in _SCHEDULES and name in _SCHEDULE_ALIASES:
        key = (_SCHEDULE_ALIASES[name], task_resolution.lower())
    if key not in _SCHEDULES:
        known = sorted({f"{p} @ {r}" for p, r in _SCHEDULES})
        raise ArgumentError(f"unknown dilation preset {preset!r} @ {task_resolution!r}; available: {known}")
    return _SCHEDULES[key]


def constant_max_schedule(level_max: int, depth: int) -> tuple[int, ...]:
    """Alternating schedule with every dilated slot at the level maximum."""
    if level_max < 1 or depth < 1:
        raise ArgumentError(f"need positive level_max and depth, got {level_max}, {depth}")
    return tuple(1 if t % 2 == 0 else level_max for t in range(depth))


def gradual_schedule(level_max: int, depth: int, cycle: int | None = None) -> tuple[int, ...]:
    """Dilated slots ramp through `cycle` evenly spaced values ending at the max.

    Undilated slots stay at 1. The ramp step is max(1, round(level_max/cycle)),
    and values repeat cyclically through deeper levels.
    """
    if level_max < 1 or depth < 1:
        raise ArgumentError(f"need positive level_max and depth, got {level_max}, {depth}")
    slots = max(1, depth // 2)
    if cycle is None:
        cycle = slots
    if cycle < 1:
        raise ArgumentError(f"cycle must be positive, got {cycle}")
    step = max(1, round(level_max / cycle))
    values = [max(1, level_max - (cycle - 1 - t) * step) for t in range(cycle)]
    out, used = [], 0
    for t in range(depth):
        if t % 2 == 0:
            out.append(1)
        else:
            out.append(values[used % cycle])
            used += 1
    return tuple(out)


# ---------------------------------------------------------------------------
# Presets

_HIER_TARGETS = {
    # name -> (params, macs at 224^2); used for report deviation lines.
    "dinat-m": (20e6, 2.7e9),
    "dinat-t": (28e6, 4.3e9),
    "dinat-s": (51e6, 7.8e9),
    "dinat-b": (90e6, 13.7e9),
    "dinat-l": (200e6, 30.6e9),
    "dinat_s-t": (28e6, 4.5e9),
    "dinat_s-s": (50e6, 8.7e9),
    "dinat_s-b": (88e6, 15.4e9),
    "dinat_s-l": (197e6, 34.5e9),
}

_PRESET_ALIASES = {
    "dinat-mini": "dinat-m", "dinat-tiny": "dinat-t", "dinat-small": "dinat-s",
    "dinat-base": "dinat-b", "dinat-large": "dinat-l",
    "dinat_s-tiny": "dinat_s-t", "dinat_s-small": "dinat_s-s",
    "dinat_s-base": "dinat_s-b", "dinat_s-large": "dinat_s-l",
}


def canonical_preset_name(name: str) -> str:
    name = name.lower()
    return _PRESET_ALIASES.get(name, name)


def preset_targets(name: str):
    """(params, macs) targets for a preset name, or None for custom configs."""
    return _HIER_TARGETS.get(canonical_preset_name(name))


def _hier_config(family, depths, base_dim, base_heads, ratio, schedule_name):
    dims = tuple(base_dim * (1 << i) for i in range(4))
    heads = tuple(base_heads * (1 << i) for i in range(4))
    dil = tuple(d for level in dilation_schedule(schedule_name, "imagenet-224") for d in level)
    return ModelConfig(
        family=family, depths=depths, dims=dims, heads=heads,
        mlp_ratio=(ratio,) * 4, kernel=7, dilations=dil, classes=1000,
    )


_PRESETS = {
    "dinat-m": lambda: _hier_config("dinat", (3, 4, 6, 5), 64, 2, 3.0, "dinat-m"),
    "dinat-t": lambda: _hier_config("dinat", (3, 4, 18, 5), 64, 2, 3.0, "dinat-t"),
    "dinat-s": lambda: _hier_config("dinat", (3, 4, 18, 5), 96, 3, 2.0, "dinat-s"),
    "dinat-b": lambda: _hier_config("dinat", (3, 4, 18, 5), 128, 4, 2.0, "dinat-b"),
    "dinat-l": lambda: _hier_config("dinat", (3, 4, 18, 5), 192, 6, 2.0, "dinat-l"),
    "dinat_s-t": lambda: _hier_config("dinat_s", (2, 2, 6, 2), 96, 3, 4.0, "dinat_s-t"),
    "dinat_s-s": lambda: _hier_config("dinat_s", (2, 2, 18, 2), 96, 3, 4.0, "dinat_s-s"),
    "dinat_s-b": lambda: _hier_config("dinat_s", (2, 2, 18, 2), 128, 4, 4.0, "dinat_s-b"),
    "dinat_s-l": lambda: _hier_config("dinat_s", (2, 2, 18, 2), 192, 6, 4.0, "dinat_s-l"),
}


def isotropic_config(pattern: str = "na-dina", dim: int = 384, heads: int = 6,
                     depth: int = 12, kernel: int = 7, classes: int = 1000,
                     grid: int = 14) -> ModelConfig:
    """Single-level config with a repeating two-layer attention pattern.

    pattern is a dash-separated pair over {na, dina, sa}; dilated slots use
    the largest dilation the grid admits.
    """
    pair = tuple(p.strip().upper().replace("DINA", "DiNA") for p in pattern.split("-"))
    if len(pair) != 2 or any(p not in LAYER_KINDS for p in pair):
        raise ConfigError(f"pattern must be two of na/dina/sa, got {pattern!r}")
    order = tuple(pair[t % 2] for t in range(depth))
    dmax = max_dilation(grid, kernel)
    dilations = tuple(dmax if kind == "DiNA" else 1 for kind in order)
    return ModelConfig(
        family="isotropic", depths=(depth,), dims=(dim,), heads=(heads,),
        mlp_ratio=(4.0,), kernel=kernel, dilations=dilations, classes=classes,
        layer_order=order,
    )


def preset(name: str) -> ModelConfig:
    canon = canonical_preset_name(name)
    if canon in _PRESETS:
        return _PRESETS[canon]()
    if canon in ("iso-s", "iso-small"):
        return isotropic_config("na-dina", 384, 6, 12)
    if canon in ("iso-b", "iso-base"):
        return isotropic_config("na-dina", 768, 12, 12)
    raise ArgumentError(f"unknown preset {name!r}; available: {preset_names()}")


def preset_names() -> list[str]:
    return sorted(_PRESETS) + ["iso-s", "iso-b"]


# ---------------------------------------------------------------------------
# Built models


@dataclass
class ConvModule:
    weight: np.ndarray
    bias: np.ndarray
    stride: int
    pad: int


@dataclass
class NormModule:
    gamma: np.ndarray
    beta: np.ndarray


@dataclass
class MlpModule:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class Block:
    kind: str  # NA | DiNA | SA
    norm1: NormModule
    attn: AttentionLayerState
    norm2: NormModule
    mlp: MlpModule


@dataclass
class Level:
    blocks: list[Block]
    downsample: ConvModule | None
    down_norm: NormModule | None
    extent: tuple[int, int]


@dataclass
class Model:
    config: ModelConfig
    input_resolution: tuple[int, int]
    stem_convs: list[ConvModule]
    stem_norm: NormModule
    levels: list[Level]
    final_norm: NormModule
    head_weight: np.ndarray
    head_bias: np.ndarray

    def parameters(self) -> dict[str, np.ndarray]:
        """Stable name -> array view of every learnable tensor."""
        out: dict[str, np.ndarray] = {}
        for i, conv in enumerate(self.stem_convs):
            out[f"stem.conv{i}.weight"] = conv.weight
            out[f"stem.conv{i}.bias"] = conv.bias
        out["stem.norm.gamma"] = self.stem_norm.gamma
        out["stem.norm.beta"] = self.stem_norm.beta
        for li, level in enumerate(self.levels):
            for bi, blk in enumerate(level.blocks):
                p = f"levels.{li}.blocks.{bi}"
                out[f"{p}.norm1.gamma"] = blk.norm1.gamma
                out[f"{p}.norm1.beta"] = blk.norm1.beta
                out[f"{p}.attn.qkv_weight"] = blk.attn.qkv_weight
                out[f"{p}.attn.qkv_bias"] = blk.attn.qkv_bias
                out[f"{p}.attn.proj_weight"] = blk.attn.proj_weight
                out[f"{p}.attn.proj_bias"] = blk.attn.proj_bias
                out[f"{p}.attn.rpb"] = blk.attn.rpb
                out[f"{p}.norm2.gamma"] = blk.norm2.gamma
                out[f"{p}.norm2.beta"] = blk.norm2.beta
                out[f"{p}.mlp.w1"] = blk.mlp.w1
                out[f"{p}.mlp.b1"] = blk.mlp.b1
                out[f"{p}.mlp.w2"] = blk.mlp.w2
                out[f"{p}.mlp.b2"] = blk.mlp.b2
            if level.downsample is not None:
                out[f"levels.{li}.down.weight"] = level.downsample.weight
                out[f"levels.{li}.down.bias"] = level.downsample.bias
                out[f"levels.{li}.down.norm.gamma"] = level.down_norm.gamma
                out[f"levels.{li}.down.norm.beta"] = level.down_norm.beta
        out["final_norm.gamma"] = self.final_norm.gamma
        out["final_norm.beta"] = self.final_norm.beta
        out["head.weight"] = self.head_weight
        out["head.bias"] = self.head_bias
        return out

    def layer_states(self) -> list[AttentionLayerState]:
        return [blk.attn for level in self.levels for blk in level.blocks]


def count_params(model: Model) -> int:
    return sum(int(arr.size) for arr in model.parameters().values())


def level_extents(config: ModelConfig, input_resolution) -> list[tuple[int, int]]:
    """Feature-map extent entering each level; validates divisibility."""
    h, w = input_resolution
    if config.family == "isotropic":
        if h % ISO_PATCH or w % ISO_PATCH:
            raise ConfigError(f"isotropic models need resolution divisible by {ISO_PATCH}, got {h}x{w}")
        return [(h // ISO_PATCH, w // ISO_PATCH)]
    if h % 32 or w % 32:
        raise ConfigError(f"hierarchical models need resolution divisible by 32, got {h}x{w}")
    return [(h // (4 << i), w // (4 << i)) for i in range(4)]


def _validate_dilations(config: ModelConfig, extents) -> None:
    kinds = config.layer_kinds()
    idx = 0
    for li, depth in enumerate(config.depths):
        eh, ew = extents[li]
        for _ in range(depth):
            delta = config.dilations[idx]
            if kinds[idx] != "SA" and (config.kernel * delta > eh or config.kernel * delta > ew):
                raise ConfigError(
                    f"layer {idx}: extent {eh}x{ew} at level {li} does not admit "
                    f"k={config.kernel}, delta={delta} (need k*delta <= extent; "
                    f"max dilation here is {min(eh, ew) // config.kernel})"
                )
            idx += 1


def _norm(dim, dtype=np.float32) -> NormModule:
    return NormModule(gamma=np.ones(dim, dtype=dtype), beta=np.zeros(dim, dtype=dtype))


def build_model(config: ModelConfig, input_resolution, seed: int = 0) -> Model:
    """Instantiate a model: linear projections truncated-normal (std 0.02),
    convolutions fan-in scaled (they feed norms directly, so a 0.02 init would
    push the norm into its singular regime), biases and bias tables zero,
    norm scales one."""
    extents = level_extents(config, input_resolution)
    _validate_dilations(config, extents)
    rng = SplitMix64(seed)

    def w(shape):
        return rng.trunc_normal(shape, std=0.02).astype(np.float32)

    def conv(cin, cout, k, stride, pad):
        fan_in = k * k * cin
        weight = rng.trunc_normal((k, k, cin, cout), std=fan_in ** -0.5).astype(np.float32)
        return ConvModule(weight=weight, bias=np.zeros(cout, dtype=np.float32), stride=stride, pad=pad)

    dim0 = config.dims[0]
    if config.family == "dinat":
        stem = [conv(3, dim0 // 2, 3, 2, 1), conv(dim0 // 2, dim0, 3, 2, 1)]
    elif config.family == "dinat_s":
        stem = [conv(3, dim0, 4, 4, 0)]
    else:
        stem = [conv(3, dim0, ISO_PATCH, ISO_PATCH, 0)]
    stem_norm = _norm(dim0)

    kinds = config.layer_kinds()
    levels: list[Level] = []
    idx = 0
    for li, depth in enumerate(config.depths):
        dim, heads, ratio = config.dims[li], config.heads[li], config.mlp_ratio[li]
        hidden = int(dim * ratio)
        blocks = []
        for _ in range(depth):
            kind = kinds[idx]
            spec = NeighborhoodSpec(config.kernel, config.dilations[idx] if kind != "SA" else 1)
            attn = AttentionLayerState.create(dim, heads, spec, ndim=2, rng=rng)
            blocks.append(Block(
                kind=kind, norm1=_norm(dim), attn=attn, norm2=_norm(dim),
                mlp=MlpModule(w1=w((dim, hidden)), b1=np.zeros(hidden, dtype=np.float32),
                              w2=w((hidden, dim)), b2=np.zeros(dim, dtype=np.float32)),
            ))
            idx += 1
        if li + 1 < len(config.depths):
            nxt = config.dims[li + 1]
            down = conv(dim, nxt, 3, 2, 1) if config.family == "dinat" else conv(dim, nxt, 2, 2, 0)
            levels.append(Level(blocks=blocks, downsample=down, down_norm=_norm(nxt), extent=extents[li]))
        else:
            levels.append(Level(blocks=blocks, downsample=None, down_norm=None, extent=extents[li]))

    dlast = config.dims[-1]
    return Model(
        config=config, input_resolution=tuple(input_resolution),
        stem_convs=stem, stem_norm=stem_norm, levels=levels,
        final_norm=_norm(dlast),
        head_weight=w((dlast, config.classes)),
        head_bias=np.zeros(config.classes, dtype=np.float32),
    )


def set_test_time_dilation(model: Model, dilations) -> Model:
    """New model view with replaced per-layer dilations; weights are shared."""
    dilations = tuple(int(d) for d in dilations)
    config = dataclasses.replace(model.config, dilations=dilations)
    extents = level_extents(config, model.input_resolution)
    _validate_dilations(config, extents)
    idx = 0
    new_levels = []
    for level in model.levels:
        new_blocks = []
        for blk in level.blocks:
            delta = dilations[idx] if blk.kind != "SA" else 1
            new_attn = blk.attn.with_spec(NeighborhoodSpec(blk.attn.spec.k, delta))
            new_blocks.append(dataclasses.replace(blk, attn=new_attn))
            idx += 1
        new_levels.append(dataclasses.replace(level, blocks=new_blocks))
    return dataclasses.replace(model, config=config, levels=new_levels)


# ---------------------------------------------------------------------------
# Forward / backward

_LN_EPS = 1e-5


def _block_forward(x, blk: Block, keep: bool):
    a = layer_norm(x, blk.norm1.gamma, blk.norm1.beta, _LN_EPS)
    if blk.kind == "SA":
        attn_out, attn_saved = attention._sa_apply(a, blk.attn, keep)
    else:
        attn_out, attn_saved = attention._na_apply(a, blk.attn, tiled=False, keep=keep)
    y = x + attn_out
    c = layer_norm(y, blk.norm2.gamma, blk.norm2.beta, _LN_EPS)
    h1 = linear(c, blk.mlp.w1, blk.mlp.b1)
    h2 = gelu(h1)
    z = y + linear(h2, blk.mlp.w2, blk.mlp.b2)
    saved = (x, attn_saved, y, c, h1, h2) if keep else None
    return z, saved


def _block_backward(g, blk: Block, saved, grads: dict, prefix: str):
    x, attn_saved, y, c, h1, h2 = saved
    g_h2, d_w2, d_b2 = linear_backward(g, h2, blk.mlp.w2)
    g_h1 = gelu_backward(g_h2, h1)
    g_c, d_w1, d_b1 = linear_backward(g_h1, c, blk.mlp.w1)
    g_y_mlp, d_g2, d_be2 = layer_norm_backward(g_c, y, blk.norm2.gamma, _LN_EPS)
    g_y = g + g_y_mlp
    if blk.kind == "SA":
        g_a, attn_grads = attention.self_attention_backward(attn_saved, g_y)
    else:
        g_a, attn_grads = attention.na_backward(attn_saved, g_y)
    g_x_attn, d_g1, d_be1 = layer_norm_backward(g_a, x, blk.norm1.gamma, _LN_EPS)
    g_x = g_y + g_x_attn
    grads[f"{prefix}.norm1.gamma"] = d_g1
    grads[f"{prefix}.norm1.beta"] = d_be1
    grads[f"{prefix}.attn.qkv_weight"] = attn_grads.qkv_weight
    grads[f"{prefix}.attn.qkv_bias"] = attn_grads.qkv_bias
    grads[f"{prefix}.attn.proj_weight"] = attn_grads.proj_weight
    grads[f"{prefix}.attn.proj_bias"] = attn_grads.proj_bias
    grads[f"{prefix}.attn.rpb"] = attn_grads.rpb
    grads[f"{prefix}.norm2.gamma"] = d_g2
    grads[f"{prefix}.norm2.beta"] = d_be2
    grads[f"{prefix}.mlp.w1"] = d_w1
    grads[f"{prefix}.mlp.b1"] = d_b1
    grads[f"{prefix}.mlp.w2"] = d_w2
    grads[f"{prefix}.mlp.b2"] = d_b2
    return g_x


def _forward(model: Model, images, keep: bool):
    h, w = model.input_resolution
    images = np.asarray(images)
    if images.dtype != np.float64:  # float64 passes through for probe runs
        images = images.astype(np.float32)
    if images.ndim != 4 or images.shape[1:] != (h, w, 3):
        raise DimensionError(f"expected images of shape (B, {h}, {w}, 3), got {images.shape}")
    tape = [] if keep else None
    x = images
    for ci, conv in enumerate(model.stem_convs):
        if keep:
            tape.append(("conv", x, conv, f"stem.conv{ci}"))
        x = conv2d(x, conv.weight, conv.bias, conv.stride, conv.pad)
    if keep:
        tape.append(("norm", x, model.stem_norm, "stem.norm"))
    x = layer_norm(x, model.stem_norm.gamma, model.stem_norm.beta, _LN_EPS)
    for li, level in enumerate(model.levels):
        for bi, blk in enumerate(level.blocks):
            x, saved = _block_forward(x, blk, keep)
            if keep:
                tape.append(("block", saved, blk, f"levels.{li}.blocks.{bi}"))
        if level.downsample is not None:
            if keep:
                tape.append(("conv", x, level.downsample, f"levels.{li}.down"))
            x = conv2d(x, level.downsample.weight, level.downsample.bias,
                       level.downsample.stride, level.downsample.pad)
            if keep:
                tape.append(("norm", x, level.down_norm, f"levels.{li}.down.norm"))
            x = layer_norm(x, level.down_norm.gamma, level.down_norm.beta, _LN_EPS)
    batch = x.shape[0]
    tokens = x.reshape(batch, -1, x.shape[-1])
    pooled = tokens.mean(axis=1)
    if keep:
        tape.append(("pool", x.shape))
        tape.append(("norm", pooled, model.final_norm, "final_norm"))
    pooled_n = layer_norm(pooled, model.final_norm.gamma, model.final_norm.beta, _LN_EPS)
    if keep:
        tape.append(("head", pooled_n))
    logits = linear(pooled_n, model.head_weight, model.head_bias)
    return logits, tape


def forward(model: Model, images) -> np.ndarray:
    """Deterministic logits for a batch of images at the build resolution."""
    return _forward(model, images, keep=False)[0]


def forward_traced(model: Model, images):
    return _forward(model, images, keep=True)


def backward(model: Model, tape, grad_logits) -> dict[str, np.ndarray]:
    """Walk the tape in reverse; returns grads keyed like Model.parameters()."""
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    for entry in reversed(tape):
        op = entry[0]
        if op == "head":
            pooled_n = entry[1]
            g, dw, db = linear_backward(g, pooled_n, model.head_weight)
            grads["head.weight"] = dw
            grads["head.bias"] = db
        elif op == "norm":
            _, xin, norm, name = entry
            g, dgm, dbt = layer_norm_backward(g, xin, norm.gamma, _LN_EPS)
            grads[f"{name}.gamma"] = dgm
            grads[f"{name}.beta"] = dbt
        elif op == "pool":
            map_shape = entry[1]
            batch, eh, ew, dim = map_shape
            g = np.broadcast_to(g[:, None, :] / (eh * ew), (batch, eh * ew, dim)).reshape(map_shape)
        elif op == "block":
            _, saved, blk, prefix = entry
            g = _block_backward(g, blk, saved, grads, prefix)
        elif op == "conv":
            _, xin, conv, name = entry
            g, dw, db = conv2d_backward(g, xin, conv.weight, conv.stride, conv.pad)
            grads[f"{name}.weight"] = dw
            grads[f"{name}.bias"] = db
    return grads


# ---------------------------------------------------------------------------
# Weight archive (.dnw): 8-byte little-endian manifest length, UTF-8 JSON
# manifest {name: {dtype, shape, offset}}, then contiguous little-endian
# float32 payload.


def save_weights(model: Model, path) -> None:
    params = model.parameters()
    manifest: dict[str, dict] = {}
    offset = 0
    for name, arr in params.items():
        manifest[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        offset += 4 * int(arr.size)
    mbytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path, config: ModelConfig, input_resolution, seed: int = 0) -> Model:
    """Rebuild a model from config and fill every tensor from the archive.

    The archive stores tensors only; the config is the caller's contract and
    every tensor is validated against it (first mismatch is named).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ArchiveError("archive too short for the manifest-length header")
    (mlen,) = struct.unpack("<Q", blob[:8])
    if 8 + mlen > len(blob):
        raise ArchiveError(f"manifest length {mlen} exceeds archive size {len(blob)}")
    try:
        manifest = json.loads(blob[8 : 8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"manifest is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise ArchiveError("manifest must be a JSON object")
    payload = blob[8 + mlen :]

    spans = []
    for name, entry in manifest.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "offset"}:
            raise ArchiveError(f"malformed manifest entry for {name!r}")
        if entry["dtype"] != "f32":
            raise ArchiveError(f"tensor {name!r} has unsupported dtype {entry['dtype']!r}")
        numel = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        spans.append((int(entry["offset"]), 4 * numel, name))
    spans.sort()
    cursor = 0
    for off, size, name in spans:
        if off != cursor:
            raise ArchiveError(f"tensor {name!r} at offset {off} overlaps or leaves a gap (expected {cursor})")
        cursor += size
    if cursor != len(payload):
        raise ArchiveError(f"payload length {len(payload)} does not match manifest total {cursor}")

    model = build_model(config, input_resolution, seed=seed)
    params = model.parameters()
    for name, arr in params.items():
        entry = manifest.get(name)
        if entry is None:
            raise ArchiveError(f"archive is missing tensor {name!r}")
        if tuple(entry["shape"]) != arr.shape:
            raise ArchiveError(
                f"tensor {name!r} has shape {tuple(entry['shape'])} in the archive but the config needs {arr.shape}"
            )
        off = int(entry["offset"])
        data = np.frombuffer(payload, dtype="<f4", count=arr.size, offset=off).reshape(arr.shape)
        arr[...] = data
    extra = sorted(set(manifest) - set(params))
    if extra:
        raise ArchiveError(f"archive holds tensors the config does not define: {extra}")
    return model
