"""Deterministic 64-bit PRNG used for datasets, weight init, and batch order.

The generator is a splitmix-style counter PRNG, fully specified here so that
datasets and initializations reproduce bit-for-bit across machines and
library versions:

* state advances by the 64-bit golden-ratio increment ``0x9E3779B97F4A7C15``;
* each output is ``mix(state)`` with the usual two xor-multiply rounds
  (``0xBF58476D1CE4E5B9``, ``0x94D049BB133111EB``) and a final 31-bit xorshift;
* uniforms in [0, 1) take the top 53 bits of an output word;
* normals apply Box-Muller to consecutive uniform pairs (cos then sin);
* truncated normals reject draws outside +/- 2 standard deviations.

Bulk draws are vectorized by evaluating ``mix`` on the counter sequence
directly; the streams are identical to repeated scalar ``next_u64`` calls.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO53 = float(1 << 53)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * _MIX2) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 stream with vectorized bulk draws."""

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = int(seed) & 0xFFFFFFFFFFFFFFFF

    def fork(self, salt: int) -> "SplitMix64":
        """Independent child stream; does not advance this stream."""
        return SplitMix64(_mix_int((self._state ^ (int(salt) * _GOLDEN)) & 0xFFFFFFFFFFFFFFFF))

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & 0xFFFFFFFFFFFFFFFF
        return _mix_int(self._state)

    def _raw(self, count: int) -> np.ndarray:
        counters = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(_GOLDEN)
        counters += np.uint64(self._state)
        self._state = (self._state + count * _GOLDEN) & 0xFFFFFFFFFFFFFFFF
        return _mix_array(counters)

    def uniform(self, shape) -> np.ndarray:
        """float64 uniforms in [0, 1)."""
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out = (self._raw(count) >> np.uint64(11)).astype(np.float64) / _TWO53
        return out.reshape(shape)

    def integers(self, upper: int, count: int) -> np.ndarray:
        """count integers in [0, upper) via modulo reduction."""
        return (self._raw(count) % np.uint64(upper)).astype(np.int64)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """float64 normals via Box-Muller on uniform pairs."""
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        pairs = (count + 1) // 2
        raw = self._raw(2 * pairs)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1)
        u1 = ((raw[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (raw[pairs:] >> np.uint64(11)).astype(np.float64) / _TWO53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        both = np.empty(2 * pairs, dtype=np.float64)
        both[0::2] = radius * np.cos(angle)
        both[1::2] = radius * np.sin(angle)
        return (std * both[:count]).reshape(shape)

    def trunc_normal(self, shape, std: float = 1.0, limit: float = 2.0) -> np.ndarray:
        """Normals rejected outside +/- limit standard deviations."""
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        accepted = np.empty(0, dtype=np.float64)
        while accepted.size < count:
            batch = self.normal((max(count - accepted.size, 16),))
            batch = batch[np.abs(batch) <= limit]
            accepted = np.concatenate([accepted, batch])
        return (std * accepted[:count]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        order = np.arange(n, dtype=np.int64)
        if n < 2:
            return order
        draws = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            order[i], order[j] = order[j], order[i]
        return order
