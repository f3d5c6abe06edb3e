"""Multi-head window attention: reference and cache-tiled execution paths.

Per head, the layer computes ``logit[i, j] = q_i . k_w(i,j) + bias[t(i,j)]``
over each query's k (1-D) or k*k (2-D) window, softmaxes the scaled logits,
and mixes the windowed values, as a two-stage QK / AV computation.  Windows
are addressed in the source tensors; no (queries x window x channels) window
tensor is ever materialized.

Two executions of the gather stages exist:

* the reference path walks window slots and gathers rows through the
  precomputed index map;
* the tiled path processes each dilation residue class as one contiguous
  staged block and addresses every window slot with plain slices: queries are
  walked in fixed-size tiles whose covering key/value stripe is the tile
  extent plus the window reach, clamped to the class bounds.

Both paths perform the identical multiply-then-reduce per output element
(an elementwise product followed by a pairwise sum over the head channel),
so their outputs are bit-identical, not merely close.  The same discipline
makes a dilated layer decompose exactly into independent undilated layers
over its residue-class subsequences.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InvalidWindowError, StateError
from .neighborhood import NeighborhoodSpec, NeighborIndexMap, build_neighbor_map
from .prng import SplitMix64
from .tensorops import linear, linear_backward, softmax_lastdim, softmax_lastdim_backward

try:  # jitted value-mix kernels; the numpy loops below are the same math
    import numba

    @numba.njit(cache=True, fastmath=False)
    def _av_gather_kernel(attn, v, fwd):
        batch, n, slots = attn.shape
        d = v.shape[2]
        out = np.zeros((batch, n, d), v.dtype)
        for b in range(batch):
            for i in range(n):
                acc = out[b, i]
                for j in range(slots):
                    w = attn[b, i, j]
                    src = v[b, fwd[i, j]]
                    for c in range(d):
                        acc[c] += w * src[c]
        return out

    @numba.njit(cache=True, fastmath=False)
    def _av_staged_1d_kernel(attn, v, k):
        batch, m, d = v.shape
        r = (k - 1) // 2
        out = np.zeros((batch, m, d), v.dtype)
        for b in range(batch):
            for i in range(m):
                start = min(max(i - r, 0), m - k)
                acc = out[b, i]
                for j in range(k):
                    w = attn[b, i, j]
                    src = v[b, start + j]
                    for c in range(d):
                        acc[c] += w * src[c]
        return out

    @numba.njit(cache=True, fastmath=False)
    def _av_staged_2d_kernel(attn, v, k):
        batch, my, mx, d = v.shape
        r = (k - 1) // 2
        out = np.zeros((batch, my, mx, d), v.dtype)
        for b in range(batch):
            for y in range(my):
                ystart = min(max(y - r, 0), my - k)
                for x in range(mx):
                    xstart = min(max(x - r, 0), mx - k)
                    acc = out[b, y, x]
                    for jy in range(k):
                        for jx in range(k):
                            w = attn[b, y, x, jy * k + jx]
                            src = v[b, ystart + jy, xstart + jx]
                            for c in range(d):
                                acc[c] += w * src[c]
        return out

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

# Query-tile geometry for the tiled path. Correctness does not depend on the
# values; they only set the granularity of the staged key/value stripes.
TILE_1D = 64
TILE_2D_ROWS = 8

# Fault-injection hooks for the self-check harness's mutation test. Empty in
# normal operation.
_DEBUG_MUTATIONS: dict[str, float] = {}

_AXIS_NAMES = {1: ("length",), 2: ("height", "width")}


@dataclass(frozen=True)
class GatherPlan:
    """Flattened window geometry for one spatial shape (1-D or 2-D)."""

    extents: tuple[int, ...]
    spec: NeighborhoodSpec
    forward: np.ndarray  # (tokens, slots) source indices
    bias: np.ndarray  # (tokens, slots) bias-table indices
    table_size: int

    @property
    def n(self) -> int:
        return int(np.prod(self.extents))

    @property
    def slots(self) -> int:
        return self.forward.shape[1]


_PLAN_CACHE: dict[tuple, GatherPlan] = {}


def clear_plan_cache() -> None:
    _PLAN_CACHE.clear()


def plan_for(extents: tuple[int, ...], spec: NeighborhoodSpec) -> GatherPlan:
    key = (extents, spec.k, spec.delta)
    plan = _PLAN_CACHE.get(key)
    if plan is not None:
        return plan
    for name, extent in zip(_AXIS_NAMES[len(extents)], extents):
        try:
            spec.validate_for(extent)
        except InvalidWindowError as exc:
            raise InvalidWindowError(f"axis {name}: {exc}") from None
    if len(extents) == 1:
        amap = build_neighbor_map(extents[0], spec)
        plan = GatherPlan(extents, spec, amap.forward, amap.bias, amap.table_size)
    else:
        h, w = extents
        ymap = build_neighbor_map(h, spec)
        xmap = build_neighbor_map(w, spec)
        k = spec.k
        fwd = (ymap.forward[:, None, :, None] * w + xmap.forward[None, :, None, :]).reshape(h * w, k * k)
        bias = (ymap.bias[:, None, :, None] * (2 * k - 1) + xmap.bias[None, :, None, :]).reshape(h * w, k * k)
        plan = GatherPlan(extents, spec, fwd, bias, (2 * k - 1) ** 2)
    _PLAN_CACHE[key] = plan
    return plan


def _plan_from(nmap) -> GatherPlan:
    if isinstance(nmap, GatherPlan):
        return nmap
    if isinstance(nmap, NeighborIndexMap):
        return GatherPlan((nmap.n,), nmap.spec, nmap.forward, nmap.bias, nmap.table_size)
    raise DimensionError(f"expected a neighbor map or gather plan, got {type(nmap).__name__}")


# ---------------------------------------------------------------------------
# Layer parameters


@dataclass
class AttentionLayerState:
    """Learnables of one attention layer plus its window spec.

    rpb has shape (heads, 2k-1) for 1-D layers and (heads, 2k-1, 2k-1) for
    2-D layers; one table per head, shared across dilation values.
    """

    dim: int
    heads: int
    spec: NeighborhoodSpec
    qkv_weight: np.ndarray
    qkv_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    rpb: np.ndarray

    def __post_init__(self):
        if self.dim % self.heads:
            raise DimensionError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.qkv_weight.shape != (self.dim, 3 * self.dim) or self.qkv_bias.shape != (3 * self.dim,):
            raise DimensionError(f"qkv shapes {self.qkv_weight.shape}, {self.qkv_bias.shape} do not match dim {self.dim}")
        if self.proj_weight.shape != (self.dim, self.dim) or self.proj_bias.shape != (self.dim,):
            raise DimensionError(f"proj shapes {self.proj_weight.shape}, {self.proj_bias.shape} do not match dim {self.dim}")
        side = 2 * self.spec.k - 1
        expect = {(self.heads, side), (self.heads, side, side)}
        if self.rpb.shape not in expect:
            raise DimensionError(f"rpb shape {self.rpb.shape} does not match heads {self.heads}, k {self.spec.k}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def ndim(self) -> int:
        return self.rpb.ndim - 1

    @classmethod
    def create(cls, dim, heads, spec, ndim, rng: SplitMix64, std: float = 0.02) -> "AttentionLayerState":
        """Truncated-normal projections (std, clipped at 2 std), zero rpb."""
        side = 2 * spec.k - 1
        rpb_shape = (heads, side) if ndim == 1 else (heads, side, side)
        return cls(
            dim=dim,
            heads=heads,
            spec=spec,
            qkv_weight=rng.trunc_normal((dim, 3 * dim), std=std).astype(np.float32),
            qkv_bias=np.zeros(3 * dim, dtype=np.float32),
            proj_weight=rng.trunc_normal((dim, dim), std=std).astype(np.float32),
            proj_bias=np.zeros(dim, dtype=np.float32),
            rpb=np.zeros(rpb_shape, dtype=np.float32),
        )

    def with_spec(self, spec: NeighborhoodSpec) -> "AttentionLayerState":
        """Same weights under a different (k-compatible) window spec."""
        if spec.k != self.spec.k:
            raise DimensionError(f"cannot swap window size {self.spec.k} -> {spec.k}: bias table is sized by k")
        return dataclasses.replace(self, spec=spec)


@dataclass
class AttentionGrads:
    qkv_weight: np.ndarray
    qkv_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray
    rpb: np.ndarray


@dataclass
class SavedAttention:
    """Forward intermediates retained for the backward pass."""

    x_shape: tuple
    x_tokens: np.ndarray  # (B*N, dim) input rows
    q: np.ndarray  # (B*heads, N, head_dim)
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray  # softmaxed weights, (B*heads, N, slots) or (B*heads, N, N)
    ctx_tokens: np.ndarray  # (B*N, dim) pre-projection rows
    plan: GatherPlan | None
    state: AttentionLayerState


# ---------------------------------------------------------------------------
# Gather stages, reference path


def na_qk(q, key, rpb, nmap) -> np.ndarray:
    """Windowed logits q_i . k_w(i,j) + bias, gathered via the index map.

    q, key: (heads, n, head_dim); rpb: (heads, table) flattened bias tables.
    """
    plan = _plan_from(nmap)
    if q.shape != key.shape or q.ndim != 3:
        raise DimensionError(f"q/key shapes do not conform: {q.shape} vs {key.shape}")
    if q.shape[1] != plan.n:
        raise DimensionError(f"map built for {plan.n} tokens, got {q.shape[1]}")
    if rpb.shape != (q.shape[0], plan.table_size):
        raise DimensionError(f"rpb shape {rpb.shape} does not match heads {q.shape[0]}, table {plan.table_size}")
    fwd = plan.forward
    logits = np.empty((q.shape[0], q.shape[1], plan.slots), dtype=q.dtype)
    for j in range(plan.slots):
        np.einsum("hnd,hnd->hn", q, key[:, fwd[:, j], :], out=logits[:, :, j])
    logits += rpb[:, plan.bias]
    return logits


def na_av(attn, v, nmap) -> np.ndarray:
    """Windowed value mix sum_j attn[i, j] * v_w(i,j), slots in ascending order."""
    plan = _plan_from(nmap)
    if attn.shape != (v.shape[0], plan.n, plan.slots) or v.shape[1] != plan.n:
        raise DimensionError(f"attn {attn.shape} / v {v.shape} do not match map ({plan.n} tokens, {plan.slots} slots)")
    if _HAVE_NUMBA:
        return _av_gather_kernel(np.ascontiguousarray(attn), np.ascontiguousarray(v), plan.forward)
    fwd = plan.forward
    out = np.zeros_like(v)
    for j in range(plan.slots):
        out += attn[:, :, j, None] * v[:, fwd[:, j], :]
    return out


# ---------------------------------------------------------------------------
# Gather stages, tiled path
#
# Each dilation residue class is a contiguous problem once its members are
# staged next to each other, so the classes of equal extent are copied into
# one (class-batched) scratch block and processed together.  Inside a class,
# window starts are clamp(i - r, 0, m - k): constant 0 for the first r
# queries, sliding for the middle, constant m - k for the last r.  Every
# window of every zone is therefore a slice of the staged block, reached
# through one strided sliding-window view; no index gathers remain.
#
# Per output element the arithmetic matches the reference path exactly: the
# QK stage reduces the channel axis with the same contiguous-inner-axis kernel
# in both paths (the contraction result does not depend on the outer layout),
# and the value mix accumulates window slots in the same ascending order, so
# the two paths agree bit for bit.


def _class_zones(m: int, k: int):
    """Left-pinned, sliding, and right-pinned query ranges of one class.

    Window starts are clamp(i - r, 0, m - k); the sliding zone is where the
    clamp is inactive: r <= i <= m - k + r.
    """
    r = (k - 1) // 2
    return (0, r, "lo"), (r, m - k + r + 1, "mid"), (m - k + r + 1, m, "hi")


def _start_slice(mode: str, a: int, b: int, r: int, m: int, k: int) -> slice:
    """Window-start range of a query zone, as indices into the window view."""
    if mode == "lo":
        return slice(0, 1)
    if mode == "hi":
        return slice(m - k, m - k + 1)
    return slice(a - r, b - r)


def _class_groups(extent: int, delta: int) -> dict[int, list[int]]:
    """Residues grouped by class size (at most two distinct sizes)."""
    groups: dict[int, list[int]] = {}
    for residue in range(delta):
        size = (extent - residue + delta - 1) // delta
        groups.setdefault(size, []).append(residue)
    return groups


def _qk_tiled_1d(q, key, plan: GatherPlan) -> np.ndarray:
    n = plan.extents[0]
    k, delta = plan.spec.k, plan.spec.delta
    r = (k - 1) // 2
    heads = q.shape[0]
    logits = np.empty((heads, n, k), dtype=q.dtype)
    for m, residues in _class_groups(n, delta).items():
        if delta == 1:
            qs, ks = q, key
        else:
            qs = np.empty((len(residues), heads, m, q.shape[2]), dtype=q.dtype)
            ks = np.empty_like(qs)
            for ci, c in enumerate(residues):
                qs[ci] = q[:, c::delta, :]
                ks[ci] = key[:, c::delta, :]
            qs = qs.reshape(len(residues) * heads, m, -1)
            ks = ks.reshape(len(residues) * heads, m, -1)
        lc = np.empty((qs.shape[0], m, k), dtype=q.dtype)
        for a, b, mode in _class_zones(m, k):
            if a >= b:
                continue
            if mode == "mid":
                for t0 in range(a, b, TILE_1D):
                    t1 = min(t0 + TILE_1D, b)
                    for j in range(k):
                        np.einsum("bnd,bnd->bn", qs[:, t0:t1, :],
                                  ks[:, t0 - r + j : t1 - r + j, :], out=lc[:, t0:t1, j])
            else:
                start = 0 if mode == "lo" else m - k
                win = ks[:, None, start : start + k, :]  # one pinned window, broadcast
                np.einsum("bnd,bnkd->bnk", qs[:, a:b, :], win, out=lc[:, a:b, :])
        if delta == 1:
            logits[:] = lc
        else:
            lc = lc.reshape(len(residues), heads, m, k)
            for ci, c in enumerate(residues):
                logits[:, c::delta, :] = lc[ci]
    return logits


def _av_staged_1d(ats, vs, k):
    if _HAVE_NUMBA:
        return _av_staged_1d_kernel(ats, vs, k)
    m = vs.shape[1]
    r = (k - 1) // 2
    win = np.swapaxes(np.lib.stride_tricks.sliding_window_view(vs, k, axis=1), 2, 3)
    oc = np.zeros_like(vs)
    for a, b, mode in _class_zones(m, k):
        if a >= b:
            continue
        wsel = win[:, _start_slice(mode, a, b, r, m, k)]
        for j in range(k):
            oc[:, a:b, :] += ats[:, a:b, j, None] * wsel[:, :, j, :]
    return oc


def _av_tiled_1d(attn, v, plan: GatherPlan) -> np.ndarray:
    n = plan.extents[0]
    k, delta = plan.spec.k, plan.spec.delta
    heads, dh = v.shape[0], v.shape[2]
    if delta == 1:
        return _av_staged_1d(np.ascontiguousarray(attn), np.ascontiguousarray(v), k)
    out = np.empty_like(v)
    for m, residues in _class_groups(n, delta).items():
        ats = np.empty((len(residues), heads, m, k), dtype=attn.dtype)
        vs = np.empty((len(residues), heads, m, dh), dtype=v.dtype)
        for ci, c in enumerate(residues):
            ats[ci] = attn[:, c::delta, :]
            vs[ci] = v[:, c::delta, :]
        oc = _av_staged_1d(ats.reshape(-1, m, k), vs.reshape(-1, m, dh), k)
        oc = oc.reshape(len(residues), heads, m, dh)
        for ci, c in enumerate(residues):
            out[:, c::delta, :] = oc[ci]
    return out


def _stage_2d(arrays, hgt, wdt, residues_y, residues_x, delta):
    """Copy the listed residue classes of each (heads, H, W, c) array into
    class-batched contiguous scratch of shape (classes*heads, my, mx, c)."""
    staged = []
    for arr in arrays:
        heads, c = arr.shape[0], arr.shape[3]
        my = (hgt - residues_y[0] + delta - 1) // delta
        mx = (wdt - residues_x[0] + delta - 1) // delta
        scratch = np.empty((len(residues_y) * len(residues_x), heads, my, mx, c), dtype=arr.dtype)
        ci = 0
        for ry in residues_y:
            for rx in residues_x:
                scratch[ci] = arr[:, ry::delta, rx::delta, :]
                ci += 1
        staged.append(scratch.reshape(ci * heads, my, mx, c))
    return staged


def _scatter_2d(target, block, residues_y, residues_x, delta, heads):
    my, mx, c = block.shape[1], block.shape[2], block.shape[3]
    block = block.reshape(len(residues_y) * len(residues_x), heads, my, mx, c)
    ci = 0
    for ry in residues_y:
        for rx in residues_x:
            target[:, ry::delta, rx::delta, :] = block[ci]
            ci += 1


def _qk_tiled_2d(q, key, plan: GatherPlan) -> np.ndarray:
    hgt, wdt = plan.extents
    k, delta = plan.spec.k, plan.spec.delta
    r = (k - 1) // 2
    heads = q.shape[0]
    logits = np.empty((heads, hgt, wdt, k * k), dtype=q.dtype)
    groups_y = _class_groups(hgt, delta)
    groups_x = _class_groups(wdt, delta)
    for my, residues_y in groups_y.items():
        for mx, residues_x in groups_x.items():
            if delta == 1:
                qs, ks = q, key
            else:
                qs, ks = _stage_2d((q, key), hgt, wdt, residues_y, residues_x, delta)
            lc = np.empty((qs.shape[0], my, mx, k, k), dtype=q.dtype)
            win = None  # windowed view built lazily for the pinned-border zones
            for ya, yb, ymode in _class_zones(my, k):
                if ya >= yb:
                    continue
                for xa, xb, xmode in _class_zones(mx, k):
                    if xa >= xb:
                        continue
                    if ymode == "mid" and xmode == "mid":
                        # sliding windows: one shifted slice per slot
                        for ty0 in range(ya, yb, TILE_2D_ROWS):
                            ty1 = min(ty0 + TILE_2D_ROWS, yb)
                            qt = qs[:, ty0:ty1, xa:xb, :]
                            for jy in range(k):
                                for jx in range(k):
                                    np.einsum(
                                        "byxd,byxd->byx", qt,
                                        ks[:, ty0 - r + jy : ty1 - r + jy, xa - r + jx : xb - r + jx, :],
                                        out=lc[:, ty0:ty1, xa:xb, jy, jx],
                                    )
                    else:
                        if win is None:
                            win = np.moveaxis(
                                np.lib.stride_tricks.sliding_window_view(ks, (k, k), axis=(1, 2)), 3, 5
                            )
                        ysel = _start_slice(ymode, ya, yb, r, my, k)
                        xsel = _start_slice(xmode, xa, xb, r, mx, k)
                        np.einsum(
                            "byxd,byxpqd->byxpq",
                            qs[:, ya:yb, xa:xb, :], win[:, ysel, xsel],
                            out=lc[:, ya:yb, xa:xb, :, :],
                        )
            lc = lc.reshape(qs.shape[0], my, mx, k * k)
            if delta == 1:
                logits[:] = lc
            else:
                _scatter_2d(logits, lc, residues_y, residues_x, delta, heads)
    return logits.reshape(heads, hgt * wdt, k * k)


def _av_staged_2d(ats, vs, k):
    if _HAVE_NUMBA:
        return _av_staged_2d_kernel(ats, vs, k)
    my, mx = vs.shape[1], vs.shape[2]
    r = (k - 1) // 2
    win = np.lib.stride_tricks.sliding_window_view(vs, (k, k), axis=(1, 2))
    win = np.moveaxis(win, 3, 5)
    oc = np.zeros_like(vs)
    for ya, yb, ymode in _class_zones(my, k):
        if ya >= yb:
            continue
        for xa, xb, xmode in _class_zones(mx, k):
            if xa >= xb:
                continue
            ysel = _start_slice(ymode, ya, yb, r, my, k)
            xsel = _start_slice(xmode, xa, xb, r, mx, k)
            wview = win[:, ysel, xsel]
            ablock = ats[:, ya:yb, xa:xb, :]
            for jy in range(k):
                for jx in range(k):
                    oc[:, ya:yb, xa:xb, :] += (
                        ablock[:, :, :, jy * k + jx, None] * wview[:, :, :, jy, jx, :]
                    )
    return oc


def _av_tiled_2d(attn, v, plan: GatherPlan) -> np.ndarray:
    hgt, wdt = plan.extents
    k, delta = plan.spec.k, plan.spec.delta
    heads = v.shape[0]
    attn4 = attn.reshape(heads, hgt, wdt, k * k)
    if delta == 1:
        return _av_staged_2d(np.ascontiguousarray(attn4), np.ascontiguousarray(v), k)
    out = np.empty_like(v)
    for my, residues_y in _class_groups(hgt, delta).items():
        for mx, residues_x in _class_groups(wdt, delta).items():
            ats, vs = _stage_2d((attn4, v), hgt, wdt, residues_y, residues_x, delta)
            oc = _av_staged_2d(ats, vs, k)
            _scatter_2d(out, oc, residues_y, residues_x, delta, heads)
    return out


def _qk_tiled(q, key, rpb, plan: GatherPlan) -> np.ndarray:
    if len(plan.extents) == 1:
        logits = _qk_tiled_1d(q, key, plan)
    else:
        hgt, wdt = plan.extents
        q4 = q.reshape(q.shape[0], hgt, wdt, -1)
        k4 = key.reshape(key.shape[0], hgt, wdt, -1)
        logits = _qk_tiled_2d(q4, k4, plan)
    logits += rpb[:, plan.bias]
    return logits


def _av_tiled(attn, v, plan: GatherPlan) -> np.ndarray:
    if len(plan.extents) == 1:
        return _av_tiled_1d(attn, v, plan)
    hgt, wdt = plan.extents
    v4 = v.reshape(v.shape[0], hgt, wdt, -1)
    return _av_tiled_2d(attn, v4, plan).reshape(v.shape)


# ---------------------------------------------------------------------------
# Full layer


def _validate_extents(x, state: AttentionLayerState):
    nd = state.ndim
    if x.ndim != nd + 2 or x.shape[-1] != state.dim:
        raise DimensionError(
            f"input shape {x.shape} does not match a {nd}-D layer of dim {state.dim}"
        )
    extents = tuple(int(e) for e in x.shape[1:-1])
    for name, extent in zip(_AXIS_NAMES[nd], extents):
        if state.spec.k * state.spec.delta > extent:
            raise InvalidWindowError(
                f"axis {name}: extent {extent} < k*delta = {state.spec.k * state.spec.delta}"
            )
    return extents


def _split_qkv(x, state: AttentionLayerState, extents):
    batch = x.shape[0]
    n = int(np.prod(extents))
    x_tokens = np.ascontiguousarray(x.reshape(batch * n, state.dim))
    qkv = linear(x_tokens, state.qkv_weight, state.qkv_bias)
    qkv = qkv.reshape(batch, n, 3, state.heads, state.head_dim).transpose(2, 0, 3, 1, 4)
    q = np.ascontiguousarray(qkv[0].reshape(batch * state.heads, n, state.head_dim))
    k = np.ascontiguousarray(qkv[1].reshape(batch * state.heads, n, state.head_dim))
    v = np.ascontiguousarray(qkv[2].reshape(batch * state.heads, n, state.head_dim))
    rpb_all = np.tile(state.rpb.reshape(state.heads, -1), (batch, 1)).astype(x_tokens.dtype, copy=False)
    return x_tokens, q, k, v, rpb_all


def _merge_heads(ctx, batch, n, state: AttentionLayerState):
    merged = ctx.reshape(batch, state.heads, n, state.head_dim).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(merged.reshape(batch * n, state.dim))


def _na_apply(x, state: AttentionLayerState, tiled: bool, keep: bool):
    extents = _validate_extents(x, state)
    batch, n = x.shape[0], int(np.prod(extents))
    plan = plan_for(extents, state.spec)
    x_tokens, q, k, v, rpb_all = _split_qkv(x, state, extents)
    scale = math.sqrt(state.head_dim)
    if tiled:
        logits = _qk_tiled(q, k, rpb_all, plan)
    else:
        logits = na_qk(q, k, rpb_all, plan)
    attn = softmax_lastdim(logits, scale)
    ctx = _av_tiled(attn, v, plan) if tiled else na_av(attn, v, plan)
    ctx_tokens = _merge_heads(ctx, batch, n, state)
    out = linear(ctx_tokens, state.proj_weight, state.proj_bias).reshape(x.shape)
    if not keep:
        return out, None
    saved = SavedAttention(
        x_shape=x.shape, x_tokens=x_tokens, q=q, k=k, v=v,
        attn=attn, ctx_tokens=ctx_tokens, plan=plan, state=state,
    )
    return out, saved


def na_forward(x, state: AttentionLayerState) -> np.ndarray:
    """Full layer: QKV projection, windowed QK, softmax(/sqrt(head_dim)), AV, output projection."""
    return _na_apply(x, state, tiled=False, keep=False)[0]


def na_forward_tiled(x, state: AttentionLayerState) -> np.ndarray:
    """Same result as na_forward via the cache-tiled gather stages."""
    return _na_apply(x, state, tiled=True, keep=False)[0]


def na_forward_traced(x, state: AttentionLayerState, tiled: bool = False):
    """Forward that retains the intermediates na_backward needs."""
    return _na_apply(x, state, tiled=tiled, keep=True)


def na_backward(saved: SavedAttention, grad_out):
    """Gradients of na_forward w.r.t. input and all layer parameters."""
    if saved is None or not isinstance(saved, SavedAttention) or saved.plan is None:
        raise StateError("na_backward needs the intermediates from na_forward_traced")
    state, plan = saved.state, saved.plan
    if grad_out.shape != saved.x_shape:
        raise DimensionError(f"grad shape {grad_out.shape} does not match forward output {saved.x_shape}")
    batch = saved.x_shape[0]
    n = plan.n
    heads, dh = state.heads, state.head_dim
    fwd = plan.forward
    scale = math.sqrt(dh)

    g_tokens = grad_out.reshape(batch * n, state.dim)
    g_ctx_tokens, d_proj_w, d_proj_b = linear_backward(g_tokens, saved.ctx_tokens, state.proj_weight)
    g_ctx = np.ascontiguousarray(
        g_ctx_tokens.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, n, dh)
    )

    g_attn = np.empty_like(saved.attn)
    g_v = np.zeros_like(saved.v)
    for j in range(plan.slots):
        g_attn[:, :, j] = (g_ctx * saved.v[:, fwd[:, j], :]).sum(axis=-1)
        np.add.at(g_v, (slice(None), fwd[:, j]), saved.attn[:, :, j, None] * g_ctx)

    g_logits = softmax_lastdim_backward(g_attn, saved.attn, scale)

    g_rpb_rep = np.zeros((batch * heads, plan.table_size), dtype=g_logits.dtype)
    np.add.at(g_rpb_rep, (slice(None), plan.bias), g_logits)
    d_rpb = g_rpb_rep.reshape(batch, heads, plan.table_size).sum(axis=0).reshape(state.rpb.shape)
    if "rpb_grad" in _DEBUG_MUTATIONS:
        d_rpb = d_rpb + _DEBUG_MUTATIONS["rpb_grad"]

    g_q = np.zeros_like(saved.q)
    g_k = np.zeros_like(saved.k)
    for j in range(plan.slots):
        g_q += g_logits[:, :, j, None] * saved.k[:, fwd[:, j], :]
        np.add.at(g_k, (slice(None), fwd[:, j]), g_logits[:, :, j, None] * saved.q)

    g_qkv = np.stack([g_q, g_k, g_v], axis=0).reshape(3, batch, heads, n, dh)
    g_qkv = g_qkv.transpose(1, 3, 0, 2, 4).reshape(batch * n, 3 * state.dim)
    g_x_tokens, d_qkv_w, d_qkv_b = linear_backward(g_qkv, saved.x_tokens, state.qkv_weight)
    grad_x = g_x_tokens.reshape(saved.x_shape)
    grads = AttentionGrads(
        qkv_weight=d_qkv_w, qkv_bias=d_qkv_b,
        proj_weight=d_proj_w, proj_bias=d_proj_b, rpb=d_rpb,
    )
    return grad_x, grads


# ---------------------------------------------------------------------------
# Unrestricted self attention (oracle and SA layers of hybrid stacks)

_OFFSET_CACHE: dict[tuple, np.ndarray] = {}


def _offset_table(extents: tuple[int, ...], k: int) -> np.ndarray:
    """(N, N) bias indices by true relative offset, clamped into the table."""
    key = (extents, k)
    table = _OFFSET_CACHE.get(key)
    if table is not None:
        return table
    side = 2 * k - 1
    if len(extents) == 1:
        n = extents[0]
        idx = np.arange(n)
        table = np.clip(idx[None, :] - idx[:, None] + (k - 1), 0, side - 1)
    else:
        h, w = extents
        ys = np.arange(h)
        xs = np.arange(w)
        offy = np.clip(ys[None, :] - ys[:, None] + (k - 1), 0, side - 1)
        offx = np.clip(xs[None, :] - xs[:, None] + (k - 1), 0, side - 1)
        table = (offy[:, None, :, None] * side + offx[None, :, None, :]).reshape(h * w, h * w)
    table = table.astype(np.int64)
    _OFFSET_CACHE[key] = table
    return table


def _sa_apply(x, state: AttentionLayerState, keep: bool):
    nd = state.ndim
    if x.ndim != nd + 2 or x.shape[-1] != state.dim:
        raise DimensionError(f"input shape {x.shape} does not match a {nd}-D layer of dim {state.dim}")
    extents = tuple(int(e) for e in x.shape[1:-1])
    batch, n = x.shape[0], int(np.prod(extents))
    x_tokens, q, k, v, rpb_all = _split_qkv(x, state, extents)
    offsets = _offset_table(extents, state.spec.k)
    logits = q @ k.transpose(0, 2, 1)
    logits += rpb_all[:, offsets]
    attn = softmax_lastdim(logits, math.sqrt(state.head_dim))
    ctx = attn @ v
    ctx_tokens = _merge_heads(ctx, batch, n, state)
    out = linear(ctx_tokens, state.proj_weight, state.proj_bias).reshape(x.shape)
    if not keep:
        return out, None
    saved = SavedAttention(
        x_shape=x.shape, x_tokens=x_tokens, q=q, k=k, v=v,
        attn=attn, ctx_tokens=ctx_tokens, plan=None, state=state,
    )
    return out, saved


def self_attention_ref(x, state: AttentionLayerState) -> np.ndarray:
    """Unrestricted attention with biases gathered by clamped relative offset.

    With delta == 1 and k equal to the axis extent, na_forward matches this
    output (the scaled softmax argument includes the bias in both).
    """
    return _sa_apply(x, state, keep=False)[0]


def self_attention_traced(x, state: AttentionLayerState):
    return _sa_apply(x, state, keep=True)


def self_attention_backward(saved: SavedAttention, grad_out):
    if saved is None or not isinstance(saved, SavedAttention) or saved.plan is not None:
        raise StateError("self_attention_backward needs intermediates from self_attention_traced")
    state = saved.state
    if grad_out.shape != saved.x_shape:
        raise DimensionError(f"grad shape {grad_out.shape} does not match forward output {saved.x_shape}")
    batch = saved.x_shape[0]
    extents = tuple(int(e) for e in saved.x_shape[1:-1])
    n = int(np.prod(extents))
    heads, dh = state.heads, state.head_dim
    scale = math.sqrt(dh)

    g_tokens = grad_out.reshape(batch * n, state.dim)
    g_ctx_tokens, d_proj_w, d_proj_b = linear_backward(g_tokens, saved.ctx_tokens, state.proj_weight)
    g_ctx = np.ascontiguousarray(
        g_ctx_tokens.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, n, dh)
    )

    g_attn = g_ctx @ saved.v.transpose(0, 2, 1)
    g_v = saved.attn.transpose(0, 2, 1) @ g_ctx
    g_logits = softmax_lastdim_backward(g_attn, saved.attn, scale)

    offsets = _offset_table(extents, state.spec.k)
    side = state.rpb.shape[-1]
    table = int(np.prod(state.rpb.shape[1:]))
    g_rpb_rep = np.zeros((batch * heads, table), dtype=g_logits.dtype)
    np.add.at(g_rpb_rep, (slice(None), offsets), g_logits)
    d_rpb = g_rpb_rep.reshape(batch, heads, table).sum(axis=0).reshape(state.rpb.shape)

    g_q = g_logits @ saved.k
    g_k = g_logits.transpose(0, 2, 1) @ saved.q

    g_qkv = np.stack([g_q, g_k, g_v], axis=0).reshape(3, batch, heads, n, dh)
    g_qkv = g_qkv.transpose(1, 3, 0, 2, 4).reshape(batch * n, 3 * state.dim)
    g_x_tokens, d_qkv_w, d_qkv_b = linear_backward(g_qkv, saved.x_tokens, state.qkv_weight)
    grads = AttentionGrads(
        qkv_weight=d_qkv_w, qkv_bias=d_qkv_b,
        proj_weight=d_proj_w, proj_bias=d_proj_b, rpb=d_rpb,
    )
    return g_x_tokens.reshape(saved.x_shape), grads
