"""Desk-scale training helpers: soft Jaccard loss, detection pseudo-masks, balanced batches."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .morphology import disc_element


def _loss_inputs(y_true, y_pred):
    t = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if t.shape != p.shape:
        raise ShapeError(f"y_true has {t.size} samples, y_pred has {p.size}")
    return t, p


def jaccard_loss(y_true, y_pred, eps: float = 1.0) -> float:
    """Soft Jaccard loss ``1 - (sum(t*p) + eps) / (sum(t^2) + sum(p^2) - sum(t*p) + eps)``."""
    t, p = _loss_inputs(y_true, y_pred)
    inter = t @ p
    return float(1.0 - (inter + eps) / (t @ t + p @ p - inter + eps))


def jaccard_loss_grad(y_true, y_pred, eps: float = 1.0) -> np.ndarray:
    """Gradient of :func:`jaccard_loss` with respect to ``y_pred`` (same shape as ``y_pred``).

    With N = sum(t*p) + eps and D = sum(t^2) + sum(p^2) - sum(t*p) + eps,
    dL/dp_i = -(t_i * D - N * (2 p_i - t_i)) / D^2.
    """
    shape = np.shape(y_pred)
    t, p = _loss_inputs(y_true, y_pred)
    inter = t @ p
    num = inter + eps
    den = t @ t + p @ p - inter + eps
    grad = -(t * den - num * (2.0 * p - t)) / (den * den)
    return grad.reshape(shape)


def make_pseudo_mask(points, width: int, height: int, radius: int = 5) -> np.ndarray:
    """Union of digital discs of ``radius`` around each point (x, y), clipped to the image."""
    mask = np.zeros((height, width), dtype=bool)
    disc = disc_element(radius).offsets
    for pt in points:
        x, y = (pt.x, pt.y) if hasattr(pt, "x") else pt[:2]
        xi, yi = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        if not (0 <= xi < width and 0 <= yi < height):
            raise ValidationError(f"point ({x}, {y}) lies outside the {width}x{height} image")
        xs, ys = disc[:, 0] + xi, disc[:, 1] + yi
        ok = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        mask[ys[ok], xs[ok]] = True
    return mask


@dataclass
class SampleIndex:
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    @classmethod
    def from_flags(cls, refs, has_til):
        pos = [r for r, f in zip(refs, has_til) if f]
        neg = [r for r, f in zip(refs, has_til) if not f]
        return cls(pos, neg)


class _NegativePool:
    """Draws negatives without replacement, reshuffling when the pool runs dry."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.order = []

    def take(self, k):
        out = []
        while len(out) < k:
            if not self.order:
                self.order = [self.items[i] for i in self.rng.permutation(len(self.items))]
            need = k - len(out)
            out.extend(self.order[:need])
            self.order = self.order[need:]
        return out


def balanced_batches(index: SampleIndex, batch_size: int, seed: int = 0, epochs: int | None = 1):
    """Yield batches with (almost) as many TIL-containing patches as empty ones.

    Every positive is used once per epoch; negatives are under-sampled
    without replacement across epochs. ``epochs=None`` streams forever.
    """
    if batch_size < 2:
        raise ValidationError("batch_size must be at least 2")
    rng = np.random.default_rng(seed)
    pos = list(index.positives)
    if not pos and not index.negatives:
        return
    if not pos:
        warnings.warn("no positive patches: falling back to plain shuffled batches", stacklevel=2)
    negatives = _NegativePool(index.negatives, rng) if index.negatives else None
    per_batch = batch_size // 2

    epoch = 0
    while epochs is None or epoch < epochs:
        epoch += 1
        if not pos:
            order = [index.negatives[i] for i in rng.permutation(len(index.negatives))]
            for k in range(0, len(order), batch_size):
                yield order[k:k + batch_size]
            continue
        shuffled = [pos[i] for i in rng.permutation(len(pos))]
        chunk = batch_size if negatives is None else per_batch
        for k in range(0, len(shuffled), chunk):
            p = shuffled[k:k + chunk]
            if negatives is None:
                batch = p
            else:
                n_neg = batch_size - per_batch if len(p) == per_batch else len(p)
                batch = p + negatives.take(n_neg)
            yield [batch[i] for i in rng.permutation(len(batch))]
