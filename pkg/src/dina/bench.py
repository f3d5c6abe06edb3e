"""Wall-time benchmark harness for the reference vs tiled attention paths.

Times the full layer forward (projections included; the two paths differ
only in the QK/AV gather stages).  Outputs are checksummed per repetition:
the paths are bit-identical by construction, so checksums must agree both
across repetitions and between paths.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .attention import AttentionLayerState, na_forward, na_forward_tiled
from .errors import ArgumentError
from .neighborhood import NeighborhoodSpec
from .prng import SplitMix64


def checksum(arr: np.ndarray) -> str:
    """Short hex digest of the raw float32 bytes."""
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()[:16]


@dataclass
class BenchResult:
    op: str
    config: dict
    median_ms: float
    p10_ms: float
    p90_ms: float
    checksum: str


_OPS = {"naive": na_forward, "tiled": na_forward_tiled}


def _quantile(sorted_times: list[float], q: float) -> float:
    pos = q * (len(sorted_times) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(sorted_times) - 1)
    frac = pos - lo
    return sorted_times[lo] * (1 - frac) + sorted_times[hi] * frac


def bench_attention(op: str, height: int, width: int, k: int, delta: int,
                    heads: int = 4, dim: int = 64, reps: int = 20, warmups: int = 3,
                    seed: int = 0) -> BenchResult:
    if op not in _OPS:
        raise ArgumentError(f"unknown op {op!r}; expected one of {sorted(_OPS)}")
    if reps < 1:
        raise ArgumentError(f"reps must be positive, got {reps}")
    fn = _OPS[op]
    rng = SplitMix64(seed)
    state = AttentionLayerState.create(dim, heads, NeighborhoodSpec(k, delta), ndim=2, rng=rng)
    state.rpb[...] = rng.normal(state.rpb.shape, std=0.02).astype(np.float32)
    x = rng.normal((1, height, width, dim)).astype(np.float32)
    for _ in range(warmups):
        fn(x, state)
    times: list[float] = []
    digest = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn(x, state)
        times.append((time.perf_counter() - t0) * 1e3)
        d = checksum(out)
        if digest is None:
            digest = d
        elif d != digest:
            raise AssertionError(f"checksum drifted across repetitions of {op}: {digest} vs {d}")
    times.sort()
    return BenchResult(
        op=op,
        config={"H": height, "W": width, "k": k, "delta": delta, "heads": heads, "dim": dim},
        median_ms=_quantile(times, 0.5),
        p10_ms=_quantile(times, 0.1),
        p90_ms=_quantile(times, 0.9),
        checksum=digest,
    )


def bench_pair(height: int, width: int, k: int, delta: int, heads: int = 4, dim: int = 64,
               reps: int = 20, warmups: int = 3, seed: int = 0):
    """(naive, tiled, speedup) with checksum agreement enforced."""
    naive = bench_attention("naive", height, width, k, delta, heads, dim, reps, warmups, seed)
    tiled = bench_attention("tiled", height, width, k, delta, heads, dim, reps, warmups, seed)
    if naive.checksum != tiled.checksum:
        raise AssertionError(f"naive/tiled checksums differ: {naive.checksum} vs {tiled.checksum}")
    return naive, tiled, naive.median_ms / tiled.median_ms
