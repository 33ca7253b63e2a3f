"""k-reciprocal re-ranking of query-gallery distances.

Neighbour lists exclude the point itself and rank ties by index.  Each
probe is encoded by Gaussian weights ``exp(-d)`` over its expanded
k-reciprocal set plus itself (normalised to sum 1), encodings are averaged
over the probe and its ``k2 - 1`` nearest neighbours, and the Jaccard
distance between encodings is blended with the original distance.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lambda_value: float = 0.3

    def __post_init__(self):
        if not (self.k1 >= self.k2 >= 1):
            raise ValueError(f"need k1 >= k2 >= 1, got k1={self.k1}, k2={self.k2}")
        if not 0.0 <= self.lambda_value <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lambda_value}")


def _check_square(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"expected a square distance matrix, got shape {dist.shape}")
    if not np.allclose(dist, dist.T, rtol=0.0, atol=1e-9):
        raise ValueError("distance matrix is not symmetric")
    if np.any(np.abs(np.diag(dist)) > 1e-9):
        raise ValueError("distance matrix has a nonzero diagonal")
    return dist


def neighbour_ranking(dist: np.ndarray) -> np.ndarray:
    """Row i lists the other points by increasing distance (index tie-break)."""
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :-1]


def _knn_mask(ranking: np.ndarray, k: int) -> np.ndarray:
    n = ranking.shape[0]
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n)[:, None], ranking[:, :k]] = True
    return mask


def _expanded_sets(ranking: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(R(p, k), expanded R*(p, k)) as boolean membership matrices."""
    knn = _knn_mask(ranking, k)
    recip = knn & knn.T
    half = _knn_mask(ranking, math.ceil(k / 2))
    recip_half = half & half.T
    overlap = recip.astype(np.int64) @ recip_half.T.astype(np.int64)
    sizes = recip_half.sum(axis=1)
    accept = recip & (3 * overlap >= 2 * sizes[None, :])
    expanded = recip | ((accept.astype(np.int64) @ recip_half.astype(np.int64)) > 0)
    return recip, expanded


def reciprocal_neighbours(all_dist: np.ndarray, probe: int, k: int) -> list[int]:
    """R(p, k) = {i in kNN(p, k) : p in kNN(i, k)}, before expansion."""
    dist = _check_square(all_dist)
    if not 1 <= k < dist.shape[0]:
        raise ValueError(f"k must lie in [1, {dist.shape[0] - 1}], got {k}")
    recip, _ = _expanded_sets(neighbour_ranking(dist), k)
    return np.flatnonzero(recip[probe]).tolist()


def k_reciprocal_set(all_dist: np.ndarray, probe: int, k: int) -> list[int]:
    """Expanded k-reciprocal set of ``probe``.

    Adds R(q, ceil(k/2)) for each q in R(p, k) whose half-size set overlaps
    R(p, k) in at least two thirds of its members.
    """
    dist = _check_square(all_dist)
    if not 1 <= k < dist.shape[0]:
        raise ValueError(f"k must lie in [1, {dist.shape[0] - 1}], got {k}")
    _, expanded = _expanded_sets(neighbour_ranking(dist), k)
    return np.flatnonzero(expanded[probe]).tolist()


def joint_distance(q_g: np.ndarray, q_q: np.ndarray, g_g: np.ndarray) -> np.ndarray:
    q_g = np.asarray(q_g, dtype=np.float64)
    q_q = np.asarray(q_q, dtype=np.float64)
    g_g = np.asarray(g_g, dtype=np.float64)
    nq, ng = q_g.shape
    if q_q.shape != (nq, nq) or g_g.shape != (ng, ng):
        raise ValueError(f"inconsistent shapes: q_g {q_g.shape}, q_q {q_q.shape}, g_g {g_g.shape}")
    return np.block([[q_q, q_g], [q_g.T, g_g]])


def rerank(q_g: np.ndarray, q_q: np.ndarray, g_g: np.ndarray, params: RerankParams = RerankParams()) -> np.ndarray:
    """Re-ranked (num_query, num_gallery) distance matrix."""
    q_g = np.asarray(q_g, dtype=np.float64)
    dist = joint_distance(q_g, q_q, g_g)
    if np.any(dist < 0):
        raise ValueError("distances must be nonnegative")
    if params.lambda_value == 1.0:
        return q_g.copy()
    n = dist.shape[0]
    nq = q_g.shape[0]
    k1, k2 = params.k1, params.k2
    if k1 > n - 1:
        log.warning("k1=%d exceeds the %d available neighbours; clamping", k1, n - 1)
        k1 = n - 1
        k2 = min(k2, k1)

    ranking = neighbour_ranking(dist)
    _, expanded = _expanded_sets(ranking, k1)
    expanded |= np.eye(n, dtype=bool)
    weights = np.where(expanded, np.exp(-dist), 0.0)
    encoding = weights / weights.sum(axis=1, keepdims=True)
    if k2 > 1:
        members = np.concatenate([np.arange(n)[:, None], ranking[:, : k2 - 1]], axis=1)
        encoding = encoding[members].mean(axis=1)

    vq = encoding[:nq]
    vg = encoding[nq:]
    jaccard = np.empty_like(q_g)
    for i in range(nq):
        inter = np.minimum(vq[i][None, :], vg).sum(axis=1)
        union = np.maximum(vq[i][None, :], vg).sum(axis=1)
        jaccard[i] = 1.0 - inter / union
    return (1.0 - params.lambda_value) * jaccard + params.lambda_value * q_g
