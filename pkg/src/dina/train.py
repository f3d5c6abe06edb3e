"""Plain SGD-with-momentum training loop over cross-entropy, desk scale.

No schedule, no weight decay, no augmentation: the loop's job is to push
gradients end to end deterministically.  Batch order comes from the seed's
splitmix stream (a fresh permutation per epoch), so a fixed seed reproduces
the loss trajectory bit for bit.
"""

from __future__ import annotations

import numpy as np

from .data import SyntheticDataset
from .model import Model, backward, forward, forward_traced
from .prng import SplitMix64


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy (float64) and its float32 logits gradient."""
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    batch = logits.shape[0]
    loss = float(-logp[np.arange(batch), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(batch), labels] -= 1.0
    return loss, (grad / batch).astype(np.float32)


class MomentumSGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(arr) for name, arr in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, arr in self.params.items():
            vel = self.velocity[name]
            vel *= self.momentum
            vel += grads[name]
            arr -= self.lr * vel


def _batches(count: int, batch_size: int, steps: int, rng: SplitMix64):
    order = rng.permutation(count)
    cursor = 0
    for _ in range(steps):
        if cursor + batch_size > count:
            order = rng.permutation(count)
            cursor = 0
        yield order[cursor : cursor + batch_size]
        cursor += batch_size


def train(model: Model, dataset: SyntheticDataset, steps: int, lr: float, seed: int = 0,
          batch_size: int = 8, log=print, log_every: int = 10) -> list[float]:
    """Run `steps` SGD updates in place; returns the per-step loss trajectory."""
    opt = MomentumSGD(model.parameters(), lr=lr)
    rng = SplitMix64(seed).fork(0xBA7C)
    losses: list[float] = []
    for step, idx in enumerate(_batches(len(dataset), min(batch_size, len(dataset)), steps, rng)):
        logits, tape = forward_traced(model, dataset.images[idx])
        loss, grad = cross_entropy(logits, dataset.labels[idx])
        grads = backward(model, tape, grad)
        opt.step(grads)
        losses.append(loss)
        if log is not None and step % log_every == 0:
            log(f"step {step:4d}  loss {loss:.6f}")
    return losses


def evaluate(model: Model, dataset: SyntheticDataset, batch_size: int = 32) -> float:
    """Top-1 accuracy over the dataset."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        logits = forward(model, dataset.images[sl])
        correct += int((logits.argmax(axis=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)
