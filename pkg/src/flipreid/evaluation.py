"""Single/double-image inference and the retrieval metrics (mAP, CMC).

Gallery entries that share both identity and camera with the query are
dropped before ranking (the usual Market-1501 protocol).  The literal
"drop every same-camera gallery entry" variant is available as
``protocol="same-camera"``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .losses import pairwise_euclidean
from .model import ReIDModel, embed_features, preprocess
from .synth import Sample, horizontal_flip

PROTOCOLS = ("standard", "same-camera")


@dataclass
class EmbeddingSet:
    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    mode: str = "single"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or len(self.identities) != n or len(self.cameras) != n:
            raise ValueError("features, identities and cameras must agree on the number of rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("embedding features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class EvalReport:
    mAP: float
    cmc: np.ndarray
    per_query_ap: np.ndarray
    num_valid_queries: int
    protocol: str = "standard"
    valid: np.ndarray = field(default=None, repr=False)

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_json(self) -> str:
        return json.dumps(
            {
                "mAP": self.mAP,
                "cmc": [float(c) for c in self.cmc],
                "num_valid_queries": self.num_valid_queries,
                "protocol": self.protocol,
            }
        )


def _images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _batched(model: ReIDModel, images: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        x = preprocess(images[start : start + batch_size], model.config.preprocess)
        out.append(embed_features(model, x))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.feature_dim))


def embed_single(model: ReIDModel, samples: list[Sample], batch_size: int = 64) -> EmbeddingSet:
    feats = _batched(model, _images(samples), batch_size)
    return EmbeddingSet(feats, [s.identity for s in samples], [s.camera for s in samples], "single")


def embed_double(model: ReIDModel, samples: list[Sample], batch_size: int = 64) -> EmbeddingSet:
    """Mean of the features of each image and its mirror."""
    images = _images(samples)
    feats = 0.5 * (_batched(model, images, batch_size) + _batched(model, horizontal_flip(images), batch_size))
    return EmbeddingSet(feats, [s.identity for s in samples], [s.camera for s in samples], "double")


def embed(model: ReIDModel, samples: list[Sample], inference: str) -> EmbeddingSet:
    if inference == "single":
        return embed_single(model, samples)
    if inference == "double":
        return embed_double(model, samples)
    raise ValueError(f"inference must be 'single' or 'double', got {inference!r}")


def flip_gap(model: ReIDModel, samples: list[Sample]) -> float:
    """Mean of ||f(x) - f(flip x)|| / ||f(x)|| over the samples."""
    images = _images(samples)
    a = _batched(model, images, 64)
    b = _batched(model, horizontal_flip(images), 64)
    norms = np.linalg.norm(a, axis=1)
    return float(np.mean(np.linalg.norm(a - b, axis=1) / np.maximum(norms, 1e-12)))


def cross_camera_mask(query_id, query_cam, gallery_ids, gallery_cams, protocol: str = "standard") -> np.ndarray:
    """True for gallery entries that take part in the ranking of this query."""
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    if protocol == "standard":
        return ~((gallery_ids == query_id) & (gallery_cams == query_cam))
    if protocol == "same-camera":
        return gallery_cams != query_cam
    raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def average_precision(matches) -> float:
    """AP of a ranked boolean list; NaN when there is no match."""
    matches = np.asarray(matches, dtype=bool)
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return math.nan
    precisions = np.arange(1, hits.size + 1) / (hits + 1)
    return math.fsum(precisions.tolist()) / hits.size


def evaluate(
    query: EmbeddingSet,
    gallery: EmbeddingSet,
    max_rank: int = 50,
    distances: np.ndarray | None = None,
    protocol: str = "standard",
) -> EvalReport:
    """mAP and CMC over the queries that keep at least one true match.

    ``distances`` may be a precomputed (e.g. re-ranked) query x gallery
    matrix; otherwise Euclidean distances are used.  Ties rank the lower
    gallery index first.
    """
    if distances is None:
        if query.dim != gallery.dim:
            raise ValueError(f"query dim {query.dim} does not match gallery dim {gallery.dim}")
        distances = pairwise_euclidean(query.features, gallery.features)
    distances = np.asarray(distances, dtype=np.float64)
    if distances.shape != (len(query), len(gallery)):
        raise ValueError(f"distance matrix shape {distances.shape} does not match {(len(query), len(gallery))}")

    max_rank = max(1, min(max_rank, len(gallery)))
    order = np.argsort(distances, axis=1, kind="stable")
    aps = np.full(len(query), np.nan)
    first_hit = np.full(len(query), -1)
    for q in range(len(query)):
        ranked = order[q]
        keep = cross_camera_mask(query.identities[q], query.cameras[q], gallery.identities[ranked], gallery.cameras[ranked], protocol)
        matches = gallery.identities[ranked][keep] == query.identities[q]
        if not matches.any():
            continue
        aps[q] = average_precision(matches)
        first_hit[q] = int(np.argmax(matches))
    valid = ~np.isnan(aps)
    num_valid = int(valid.sum())
    if num_valid == 0:
        raise ValueError("no query has a valid cross-camera match in the gallery")
    counts = np.array([(first_hit[valid] <= k).sum() for k in range(max_rank)])
    cmc = counts / num_valid
    mean_ap = math.fsum(aps[valid].tolist()) / num_valid
    return EvalReport(mean_ap, cmc, aps, num_valid, protocol, valid)
