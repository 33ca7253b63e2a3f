"""Training objectives: batch-hard triplet, cross-entropy and the flipping loss.

Each loss returns its value together with the gradient the network needs
(wrt embeddings, or wrt pre-softmax scores for cross-entropy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SamplerContractError(ValueError):
    """A batch does not give every anchor a positive and a negative."""


@dataclass(frozen=True)
class LossWeights:
    w_triplet: float = 1.0
    w_ce: float = 1.0
    w_flip: float = 1.0
    triplet_margin: float = 0.3
    soft_margin: bool = False

    def __post_init__(self):
        for name in ("w_triplet", "w_ce", "w_flip", "triplet_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.w_triplet == 0 and self.w_ce == 0:
            raise ValueError("at least one of w_triplet, w_ce must be positive")


@dataclass(frozen=True)
class LossReport:
    total: float
    triplet: float
    cross_entropy: float
    flipping: float
    active_triplet_fraction: float

    def as_record(self) -> dict:
        return {
            "total": self.total,
            "triplet": self.triplet,
            "ce": self.cross_entropy,
            "flip": self.flipping,
            "active_triplet_fraction": self.active_triplet_fraction,
        }


def pairwise_euclidean(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distance matrix via the Gram expansion, clamped at zero."""
    a = np.asarray(a, dtype=np.float64)
    same = b is None
    b = a if same else np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    if same:
        dist = 0.5 * (dist + dist.T)
        np.fill_diagonal(dist, 0.0)
    return dist


def _direct_distances(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = e[:, None, :] - e[None, :, :]
    # Accumulate dimensions left to right so results do not depend on
    # numpy's pairwise summation blocking.
    sq = np.zeros(diff.shape[:2])
    for k in range(diff.shape[2]):
        sq = sq + diff[:, :, k] * diff[:, :, k]
    return np.sqrt(sq), diff


def batch_hard_triplet(embeddings: np.ndarray, labels, margin: float = 0.3, soft: bool = False):
    """Mean over anchors of hinge(margin + hardest positive - hardest negative).

    Ties are resolved to the lowest index.  Returns ``(loss, grad, active)``
    where ``active`` is the fraction of anchors with a positive hinge.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = e.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    bad = np.where(~pos_mask.any(axis=1) | ~neg_mask.any(axis=1))[0]
    if bad.size:
        raise SamplerContractError(f"anchors {bad.tolist()} lack an in-batch positive or negative")

    dist, diff = _direct_distances(e)
    hard_pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    hard_neg = np.argmin(np.where(neg_mask, dist, np.inf), axis=1)
    rows = np.arange(n)
    d_ap = dist[rows, hard_pos]
    d_an = dist[rows, hard_neg]
    arg = margin + d_ap - d_an
    if soft:
        per_anchor = np.logaddexp(0.0, arg)
        coef = 1.0 / (1.0 + np.exp(-arg))
    else:
        per_anchor = np.maximum(arg, 0.0)
        coef = (arg > 0).astype(np.float64)
    loss = math.fsum(per_anchor.tolist()) / n

    grad = np.zeros_like(e)
    with np.errstate(invalid="ignore", divide="ignore"):
        u_ap = np.where(d_ap[:, None] > 0, diff[rows, hard_pos] / d_ap[:, None], 0.0)
        u_an = np.where(d_an[:, None] > 0, diff[rows, hard_neg] / d_an[:, None], 0.0)
    w = (coef / n)[:, None]
    # d d(a,p)/d e_a = (e_a - e_p)/d, d/d e_p is its negation.
    np.add.at(grad, rows, w * (u_ap - u_an))
    np.add.at(grad, hard_pos, -w * u_ap)
    np.add.at(grad, hard_neg, w * u_an)
    return loss, grad, float((arg > 0).mean())


def categorical_cross_entropy(probabilities, labels):
    """Mean of -log p[label] and its gradient wrt the pre-softmax scores.

    ``probabilities`` may be a single (N, K) matrix or a list of them (one per
    classifier branch); branch losses and gradients are then averaged.
    """
    if isinstance(probabilities, (list, tuple)):
        parts = [categorical_cross_entropy(p, labels) for p in probabilities]
        b = len(parts)
        return sum(loss for loss, _ in parts) / b, [g / b for _, g in parts]
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = p.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if np.any(p <= 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must be positive and sum to 1")
    rows = np.arange(n)
    loss = float(-np.log(p[rows, labels]).mean())
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad / n


def flipping_loss(f_orig: np.ndarray, f_flip: np.ndarray):
    """Mean squared error between the two orientations' feature vectors."""
    f_orig = np.asarray(f_orig, dtype=np.float64)
    f_flip = np.asarray(f_flip, dtype=np.float64)
    if f_orig.shape != f_flip.shape:
        raise ValueError(f"shape mismatch: {f_orig.shape} vs {f_flip.shape}")
    diff = f_orig - f_flip
    size = diff.size
    loss = float((diff * diff).sum() / size)
    g = 2.0 * diff / size
    return loss, g, -g


def total_loss(
    triplet: float,
    cross_entropy: float,
    weights: LossWeights,
    flipping: float | None = None,
    active_triplet_fraction: float = 0.0,
) -> LossReport:
    """Weighted sum of the components.  ``flipping=None`` means the term is absent."""
    flip = 0.0 if flipping is None else flipping
    total = weights.w_triplet * triplet + weights.w_ce * cross_entropy
    if flipping is not None:
        total += weights.w_flip * flip
    return LossReport(float(total), float(triplet), float(cross_entropy), float(flip), float(active_triplet_fraction))
