"""Window-index math for sliding-window attention with residue-class dilation.

A window spec (k, delta) assigns every position i of an axis of extent n
exactly k neighbor positions, all congruent to i modulo delta.  Within the
residue-class subsequence containing i, the window is the k consecutive class
members centered on i, shifted inward (never shrunk) when i sits near either
end of the class.  delta == 1 recovers plain nearest-neighbor windows, served
by a dedicated code path with no residue arithmetic.  The largest usable
dilation for an axis is floor(n / k), which guarantees every residue class
holds at least k members.

Each query/slot pair also carries a bias-table index: the class-relative
offset of the neighbor, shifted into [0, 2k-2].  A table of 2k-1 entries per
axis therefore covers interior windows and the inward-shifted border windows,
and the same table serves every dilation value (the index divides the raw
offset by delta), so dilation can change at evaluation time without touching
learned biases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, InvalidWindowError


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Window size and dilation for one attention layer (shared by both axes).

    k may be even only in degenerate uses (e.g. a window covering a full
    axis); model configurations reject even kernels because off-center
    windows lose their symmetry.
    """

    k: int
    delta: int = 1

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidWindowError(f"window size must be a positive integer, got {self.k}")
        if int(self.delta) != self.delta or self.delta < 1:
            raise InvalidWindowError(f"dilation must be a positive integer, got {self.delta}")

    @property
    def half(self) -> int:
        return (self.k - 1) // 2

    def validate_for(self, n: int) -> None:
        if self.k * self.delta > n:
            raise InvalidWindowError(
                f"window k={self.k} with dilation {self.delta} needs extent >= {self.k * self.delta}, got {n}"
            )


def max_dilation(n: int, k: int) -> int:
    """Largest dilation leaving every position exactly k same-residue neighbors."""
    if k < 1:
        raise InvalidWindowError(f"window size must be positive, got {k}")
    if n < k:
        raise InvalidWindowError(f"extent {n} is smaller than window size {k}; no valid dilation")
    return n // k


def _undilated_windows(n: int, k: int):
    """Forward/bias index arrays for delta == 1; no dilation logic at all."""
    starts = np.clip(np.arange(n, dtype=np.int64) - (k - 1) // 2, 0, n - k)
    slots = np.arange(k, dtype=np.int64)
    fwd = starts[:, None] + slots
    bias = fwd - np.arange(n, dtype=np.int64)[:, None] + (k - 1)
    return fwd, bias


def _dilated_windows(n: int, k: int, delta: int):
    """Forward/bias index arrays via residue-class arithmetic (any delta)."""
    idx = np.arange(n, dtype=np.int64)
    residue = idx % delta
    rank = idx // delta  # position within the residue-class subsequence
    class_size = (n - residue + delta - 1) // delta
    starts = np.clip(rank - (k - 1) // 2, 0, class_size - k)
    slots = np.arange(k, dtype=np.int64)
    fwd = residue[:, None] + (starts[:, None] + slots) * delta
    bias = starts[:, None] + slots - rank[:, None] + (k - 1)
    return fwd, bias


@dataclass(frozen=True)
class NeighborIndexMap:
    """Window geometry of one axis: per-query neighbors, bias slots, inverse.

    forward[i] lists i's k neighbor positions in increasing order; bias[i][j]
    is the bias-table index for slot j; inverse[t] lists every (query i,
    slot j) with forward[i][j] == t.
    """

    n: int
    spec: NeighborhoodSpec
    forward: np.ndarray
    bias: np.ndarray
    inverse: tuple = field(repr=False)

    @property
    def table_size(self) -> int:
        return 2 * self.spec.k - 1


def build_neighbor_map(n: int, spec: NeighborhoodSpec) -> NeighborIndexMap:
    spec.validate_for(n)
    if spec.delta == 1:
        fwd, bias = _undilated_windows(n, spec.k)
    else:
        fwd, bias = _dilated_windows(n, spec.k, spec.delta)
    inv: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for i in range(n):
        row = fwd[i]
        for j in range(spec.k):
            inv[row[j]].append((i, j))
    inverse = tuple(tuple(entries) for entries in inv)
    return NeighborIndexMap(n=n, spec=spec, forward=fwd, bias=bias, inverse=inverse)


def neighbor_indices_1d(i: int, n: int, spec: NeighborhoodSpec) -> list[int]:
    """The k neighbor positions of i on an axis of extent n."""
    spec.validate_for(n)
    if not 0 <= i < n:
        raise ArgumentError(f"position {i} outside axis of extent {n}")
    residue = i % spec.delta
    rank = i // spec.delta
    class_size = (n - residue + spec.delta - 1) // spec.delta
    start = min(max(rank - spec.half, 0), class_size - spec.k)
    return [residue + (start + j) * spec.delta for j in range(spec.k)]


def neighbor_indices_2d(ij, hw, spec: NeighborhoodSpec) -> list[tuple[int, int]]:
    """Cartesian product of the per-axis windows, row-major."""
    rows = neighbor_indices_1d(ij[0], hw[0], spec)
    cols = neighbor_indices_1d(ij[1], hw[1], spec)
    return [(y, x) for y in rows for x in cols]


def inverse_neighbor_map(n: int, spec: NeighborhoodSpec):
    """inverse[t] = every (query i, slot j) whose window covers position t."""
    return build_neighbor_map(n, spec).inverse


def rpb_index(i: int, n: int, spec: NeighborhoodSpec, j: int) -> int:
    """Bias-table index of slot j for query i: class offset shifted by k-1."""
    if not 0 <= j < spec.k:
        raise ArgumentError(f"slot {j} outside window of size {spec.k}")
    p = neighbor_indices_1d(i, n, spec)[j]
    return (p - i) // spec.delta + (spec.k - 1)
