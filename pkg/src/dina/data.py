"""Procedural shape-classification dataset, byte-identical for a given seed.

Each sample is a grayscale rendering of one shape (the class) on a noisy dark
background, replicated to three channels.  Shape kind cycles with the sample
index, so classes are balanced within one sample; position, size, and
intensity come from the dataset's splitmix stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .prng import SplitMix64

SHAPE_KINDS = ("disk", "square", "cross", "triangle", "ring")


def _render(kind: str, h: int, w: int, cy: float, cx: float, radius: float) -> np.ndarray:
    ys = np.arange(h, dtype=np.float64)[:, None] - cy
    xs = np.arange(w, dtype=np.float64)[None, :] - cx
    if kind == "disk":
        return ys * ys + xs * xs <= radius * radius
    if kind == "square":
        return np.maximum(np.abs(ys), np.abs(xs)) <= radius
    if kind == "cross":
        arm = max(radius / 3.0, 1.0)
        inside = np.maximum(np.abs(ys), np.abs(xs)) <= radius
        return inside & ((np.abs(ys) <= arm) | (np.abs(xs) <= arm))
    if kind == "triangle":
        return (ys >= -radius) & (ys <= radius) & (np.abs(xs) <= (ys + radius) / 2.0)
    if kind == "ring":
        rr = ys * ys + xs * xs
        return (rr <= radius * radius) & (rr >= (0.55 * radius) ** 2)
    raise ArgumentError(f"unknown shape kind {kind!r}")


@dataclass
class SyntheticDataset:
    seed: int
    count: int
    resolution: tuple[int, int]
    classes: int
    images: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 2 <= self.classes <= len(SHAPE_KINDS):
            raise ArgumentError(f"classes must be in [2, {len(SHAPE_KINDS)}], got {self.classes}")
        if self.count < 1:
            raise ArgumentError(f"count must be positive, got {self.count}")
        h, w = self.resolution
        if min(h, w) < 8:
            raise ArgumentError(f"resolution too small to render shapes: {self.resolution}")
        rng = SplitMix64(self.seed)
        images = np.empty((self.count, h, w, 3), dtype=np.float32)
        labels = np.empty(self.count, dtype=np.int64)
        for i in range(self.count):
            label = i % self.classes
            cy = (0.42 + 0.16 * rng.uniform(()).item()) * h
            cx = (0.42 + 0.16 * rng.uniform(()).item()) * w
            radius = (0.22 + 0.08 * rng.uniform(()).item()) * min(h, w)
            intensity = 0.85 + 0.15 * rng.uniform(()).item()
            noise = 0.04 * rng.uniform((h, w))
            gray = noise + intensity * _render(SHAPE_KINDS[label], h, w, cy, cx, radius)
            gray = np.clip(gray, 0.0, 1.0).astype(np.float32)
            images[i] = gray[:, :, None]
            labels[i] = label
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return self.count
