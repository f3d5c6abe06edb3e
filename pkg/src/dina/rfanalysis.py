"""Receptive-field, FLOP, and parameter accounting, plus a Jacobian probe.

``analytic_rf`` propagates the exact set of reachable input positions for a
center output probe backwards through a 1-D layer stack, so it handles any
mix of window kinds and dilation schedules constructively.  For an all-NA
stack of depth L this reproduces min(L*(k-1)+1, n); with dilations growing as
k^(t-1) per layer it reaches min(k^L, n).

``empirical_rf`` measures the same quantity on real, randomly initialized
layers as the support of a central-difference Jacobian: positions outside the
window closure produce a bitwise-zero output change, so a tiny threshold
separates structure from arithmetic.

FLOP counts are multiply-accumulate units; normalization, softmax, and
activations are excluded (the convention reproduces published budget tables
within tolerance).  Window attention per layer costs 3*n*d^2 + 2*n*d*k
(k = window token count), unrestricted attention 3*n*d^2 + 2*n^2*d, and a
depthwise-separable convolution n*d^2 + n*d*k; ``model_flops`` counts the
actual convolutions, linears, and QK/AV stages of a model configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionLayerState, na_forward, self_attention_ref
from .errors import ArgumentError
from .model import ISO_PATCH, ModelConfig, level_extents
from .neighborhood import NeighborhoodSpec, build_neighbor_map
from .prng import SplitMix64

ANALYTIC_KINDS = ("SA", "NA", "DiNA", "WSA", "SWSA", "DWSConv")
RUNNABLE_KINDS = ("SA", "NA", "DiNA")


@dataclass(frozen=True)
class LayerKind:
    """One analytic layer: a kind plus window size / dilation where relevant."""

    kind: str
    k: int | None = None
    delta: int = 1

    def __post_init__(self):
        if self.kind not in ANALYTIC_KINDS:
            raise ArgumentError(f"unknown layer kind {self.kind!r}; expected one of {ANALYTIC_KINDS}")
        if self.kind != "SA" and (self.k is None or self.k < 1):
            raise ArgumentError(f"kind {self.kind} needs a positive window size, got {self.k}")
        if self.delta < 1:
            raise ArgumentError(f"dilation must be positive, got {self.delta}")
        if self.delta > 1 and self.kind != "DiNA":
            raise ArgumentError(f"dilation is only meaningful for DiNA layers, got {self.kind} with delta={self.delta}")


@dataclass
class RFReport:
    analytic_rf: int
    empirical_rf: int | None
    flops: int
    params: int


def _window_reach(reach: np.ndarray, layer: LayerKind, stack_index: int, n: int) -> np.ndarray:
    """Input positions reachable through one layer from the `reach` set."""
    new = np.zeros(n, dtype=bool)
    k = layer.k
    if layer.kind == "SA":
        new[:] = True
    elif layer.kind in ("NA", "DiNA"):
        spec = NeighborhoodSpec(k, layer.delta)
        fwd = build_neighbor_map(n, spec).forward
        new[fwd[reach].ravel()] = True
    elif layer.kind == "DWSConv":
        left, right = (k - 1) // 2, k // 2
        idx = np.nonzero(reach)[0]
        for i in idx:
            new[max(0, i - left) : min(n, i + right + 1)] = True
    elif layer.kind in ("WSA", "SWSA"):
        # Non-overlapping partition; shifted layers alternate phase with stack
        # parity so consecutive shifted layers use different partitions.
        phase = (stack_index % 2) * (k // 2) if layer.kind == "SWSA" else 0
        idx = np.nonzero(reach)[0]
        for i in idx:
            block = (i + phase) // k
            new[max(0, block * k - phase) : min(n, (block + 1) * k - phase)] = True
    return new


def analytic_rf(stack: list[LayerKind], n: int) -> int:
    """Exact 1-D receptive-field width of a center output position."""
    if not stack:
        raise ArgumentError("analytic_rf needs a non-empty layer stack")
    if n < 1:
        raise ArgumentError(f"extent must be positive, got {n}")
    reach = np.zeros(n, dtype=bool)
    reach[(n - 1) // 2] = True
    for stack_index, layer in reversed(list(enumerate(stack))):
        reach = _window_reach(reach, layer, stack_index, n)
    return int(reach.sum())


# ---------------------------------------------------------------------------
# Empirical probe


@dataclass
class RunnableLayer:
    kind: str  # NA | DiNA | SA
    state: AttentionLayerState


def instantiate_stack(stack: list[LayerKind], n: int, dim: int = 8, heads: int = 2,
                      seed: int = 0) -> list[RunnableLayer]:
    """Random nonzero 1-D layers for the Jacobian probe.

    Projections use std 1/sqrt(dim) so per-layer gains stay near one and edge
    contributions remain far above the probe threshold; bias tables are drawn
    nonzero as well. SA layers without an explicit k get a full-extent table.
    """
    rng = SplitMix64(seed)
    std = 1.0 / np.sqrt(dim)
    layers = []
    for layer in stack:
        if layer.kind not in RUNNABLE_KINDS:
            raise ArgumentError(f"kind {layer.kind} is analytic-only and cannot be instantiated")
        k = layer.k if layer.k is not None else n
        state = AttentionLayerState(
            dim=dim, heads=heads, spec=NeighborhoodSpec(k, layer.delta),
            qkv_weight=rng.normal((dim, 3 * dim), std=std).astype(np.float32),
            qkv_bias=np.zeros(3 * dim, dtype=np.float32),
            proj_weight=rng.normal((dim, dim), std=std).astype(np.float32),
            proj_bias=np.zeros(dim, dtype=np.float32),
            rpb=rng.normal((heads, 2 * k - 1), std=0.5).astype(np.float32),
        )
        layers.append(RunnableLayer(kind=layer.kind, state=state))
    return layers


def run_stack(layers: list[RunnableLayer], x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = self_attention_ref(x, layer.state) if layer.kind == "SA" else na_forward(x, layer.state)
    return x


def empirical_rf(layers: list[RunnableLayer], n: int, probe_index: int,
                 seed: int = 0, step: float = 1e-3, threshold: float = 1e-7) -> int:
    """Count input positions whose perturbation moves the probed output.

    Central differences with the given step; differences are accumulated in
    float64 and compared against the threshold, which sits far above float32
    rounding yet below any genuine Jacobian entry of a generic stack.
    """
    if not layers:
        raise ArgumentError("empirical_rf needs a non-empty layer stack")
    if not 0 <= probe_index < n:
        raise ArgumentError(f"probe index {probe_index} outside extent {n}")
    dim = layers[0].state.dim
    rng = SplitMix64(seed).fork(0x9E)
    x0 = rng.normal((1, n, dim)).astype(np.float32)
    count = 0
    for pos in range(n):
        xp = x0.copy()
        xp[0, pos, :] += step
        xm = x0.copy()
        xm[0, pos, :] -= step
        delta = run_stack(layers, xp)[0, probe_index, :].astype(np.float64)
        delta -= run_stack(layers, xm)[0, probe_index, :].astype(np.float64)
        if np.abs(delta).max() > threshold:
            count += 1
    return count


# ---------------------------------------------------------------------------
# FLOPs and parameters


def layer_flops(kind: str, n: int, d: int, k: int | None = None) -> int:
    """Per-layer multiply-accumulates for one layer structure row."""
    if n < 1 or d < 1:
        raise ArgumentError(f"need positive token count and width, got n={n}, d={d}")
    if kind == "SA":
        return 3 * n * d * d + 2 * n * n * d
    if kind in ("NA", "DiNA", "WSA", "SWSA"):
        if k is None or k < 1:
            raise ArgumentError(f"kind {kind} needs a positive window token count, got {k}")
        return 3 * n * d * d + 2 * n * d * k
    if kind == "DWSConv":
        if k is None or k < 1:
            raise ArgumentError(f"kind {kind} needs a positive window token count, got {k}")
        return n * d * d + n * d * k
    raise ArgumentError(f"unknown layer kind {kind!r}; expected one of {ANALYTIC_KINDS}")


def model_params(config: ModelConfig) -> int:
    """Exact learnable-scalar count of a built model, computed analytically."""
    k = config.kernel
    side2 = (2 * k - 1) ** 2
    total = 0
    dim0 = config.dims[0]
    if config.family == "dinat":
        total += 9 * 3 * (dim0 // 2) + dim0 // 2         # stem conv 1
        total += 9 * (dim0 // 2) * dim0 + dim0           # stem conv 2
    elif config.family == "dinat_s":
        total += 16 * 3 * dim0 + dim0                    # 4x4 patch embed
    else:
        total += ISO_PATCH * ISO_PATCH * 3 * dim0 + dim0  # 16x16 patch embed
    total += 2 * dim0                                     # stem norm
    for li, depth in enumerate(config.depths):
        d, h = config.dims[li], config.heads[li]
        hidden = int(d * config.mlp_ratio[li])
        block = (
            2 * d                       # norm1
            + 3 * d * d + 3 * d         # qkv
            + d * d + d                 # out projection
            + h * side2                 # bias tables
            + 2 * d                     # norm2
            + d * hidden + hidden       # mlp in
            + hidden * d + d            # mlp out
        )
        total += depth * block
        if li + 1 < len(config.depths):
            nxt = config.dims[li + 1]
            taps = 9 if config.family == "dinat" else 4
            total += taps * d * nxt + nxt + 2 * nxt       # downsampler + norm
    dlast = config.dims[-1]
    total += 2 * dlast                                    # final norm
    total += dlast * config.classes + config.classes      # classifier
    return total


def model_flops(config: ModelConfig, resolution) -> int:
    """Forward-pass multiply-accumulates at the given resolution.

    Counts convolutions, linears (QKV, output projection, MLP, classifier),
    and the QK/AV window stages; norms, softmax, and activations excluded.
    """
    extents = level_extents(config, resolution)  # raises ConfigError if indivisible
    h, w = resolution
    k2 = config.kernel * config.kernel
    kinds = config.layer_kinds()
    macs = 0
    dim0 = config.dims[0]
    if config.family == "dinat":
        macs += (h // 2) * (w // 2) * 9 * 3 * (dim0 // 2)
        macs += (h // 4) * (w // 4) * 9 * (dim0 // 2) * dim0
    elif config.family == "dinat_s":
        macs += (h // 4) * (w // 4) * 16 * 3 * dim0
    else:
        macs += (h // ISO_PATCH) * (w // ISO_PATCH) * ISO_PATCH * ISO_PATCH * 3 * dim0
    idx = 0
    for li, depth in enumerate(config.depths):
        d = config.dims[li]
        hidden = int(d * config.mlp_ratio[li])
        eh, ew = extents[li]
        n = eh * ew
        for _ in range(depth):
            window = 2 * n * n * d if kinds[idx] == "SA" else 2 * n * d * k2
            macs += 3 * n * d * d + window + n * d * d + 2 * n * d * hidden
            idx += 1
        if li + 1 < len(config.depths):
            nxt = config.dims[li + 1]
            taps = 9 if config.family == "dinat" else 4
            macs += (eh // 2) * (ew // 2) * taps * d * nxt
    macs += config.dims[-1] * config.classes
    return macs


# ---------------------------------------------------------------------------
# Reports and rasters


def comparison_rows(stack: list[LayerKind], n: int, d: int = 64) -> list[tuple[str, int, str]]:
    """(structure, per-layer MACs, receptive field) rows for the standard kinds.

    Uses the queried stack's depth and first window size; the NA-DiNA row
    reports its constructive range (all dilations 1 .. exponential schedule).
    """
    depth = len(stack)
    k = next((layer.k for layer in stack if layer.k), 7)
    rows = []

    def rf_of(layers):
        return analytic_rf(layers, n)

    rows.append(("DWSConv-DWSConv", layer_flops("DWSConv", n, d, k), str(rf_of([LayerKind("DWSConv", k)] * depth))))
    rows.append(("WSA-WSA", layer_flops("WSA", n, d, k), str(rf_of([LayerKind("WSA", k)] * depth))))
    rows.append(("WSA-SWSA", layer_flops("WSA", n, d, k),
                 str(rf_of([LayerKind("WSA", k) if t % 2 == 0 else LayerKind("SWSA", k) for t in range(depth)]))))
    rows.append(("NA-NA", layer_flops("NA", n, d, k), str(rf_of([LayerKind("NA", k)] * depth))))
    low = rf_of([LayerKind("NA", k)] * depth)
    high = min(k ** depth, n)
    rows.append(("NA-DiNA", layer_flops("DiNA", n, d, k), f"{low}..{high}"))
    rows.append(("SA-SA", layer_flops("SA", n, d), str(rf_of([LayerKind("SA")] * depth))))
    return rows


def footprint_raster(stack: list[LayerKind], extents, probe) -> np.ndarray:
    """Grayscale 2-D receptive-field footprint of one probed pixel.

    Pixel value encodes the first backward step at which a position becomes
    reachable (probe brightest, frontier dimmest, unreachable black).  Window
    kinds are separable, so per-axis reach sets compose exactly.
    """
    h, w = extents
    py, px = probe
    if not (0 <= py < h and 0 <= px < w):
        raise ArgumentError(f"probe {probe} outside extent {extents}")
    reach_y = np.zeros(h, dtype=bool)
    reach_x = np.zeros(w, dtype=bool)
    reach_y[py] = True
    reach_x[px] = True
    depth_y = np.full(h, -1, dtype=np.int64)
    depth_x = np.full(w, -1, dtype=np.int64)
    depth_y[py] = 0
    depth_x[px] = 0
    steps = len(stack)
    for step, (stack_index, layer) in enumerate(reversed(list(enumerate(stack))), start=1):
        reach_y = _window_reach(reach_y, layer, stack_index, h)
        reach_x = _window_reach(reach_x, layer, stack_index, w)
        depth_y[(depth_y < 0) & reach_y] = step
        depth_x[(depth_x < 0) & reach_x] = step
    depth2 = np.maximum(depth_y[:, None], depth_x[None, :])
    depth2[(depth_y[:, None] < 0) | (depth_x[None, :] < 0)] = -1
    img = np.zeros((h, w), dtype=np.uint8)
    inside = depth2 >= 0
    img[inside] = np.round(255 - depth2[inside] * (160.0 / max(steps, 1))).astype(np.uint8)
    return img


def write_pgm(path, image: np.ndarray) -> None:
    """Plain-text (P2) PGM with maxval 255."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ArgumentError(f"PGM writer needs a 2-D uint8 image, got {image.dtype} {image.shape}")
    lines = ["P2", f"{image.shape[1]} {image.shape[0]}", "255"]
    lines.extend(" ".join(str(int(v)) for v in row) for row in image)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
