"""Synthetic person-like images and the training-time augmentations.

Images are ``uint8`` arrays shaped ``(channels, height, width)``.  Every
randomized function takes an explicit ``numpy.random.Generator`` and is a
pure function of its inputs and the generator state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

SPLITS = ("train", "query", "gallery")
LUMA = (0.299, 0.587, 0.114)
ERASE_ATTEMPTS = 10
# Pixel-scale spread of identity-specific symmetric and antisymmetric content.
SYMMETRIC_CONTRAST = 25.0
ASYMMETRIC_CONTRAST = 70.0


class ValidationError(ValueError):
    """Raised when a configuration or data record violates its invariants."""


@dataclass(frozen=True)
class DatasetSpec:
    num_identities: int = 20
    images_per_identity: int = 8
    num_cameras: int = 3
    height: int = 32
    width: int = 16
    channels: int = 3
    asymmetry_strength: float = 0.8
    noise_std: float = 12.0
    seed: int = 0
    # Probability that a given image shows the person mirrored (walking the
    # other way).  Mirroring keeps symmetric prototypes symmetric.
    mirror_prob: float = 0.5

    def validate(self) -> None:
        if self.num_identities < 2:
            raise ValidationError(f"num_identities must be >= 2, got {self.num_identities}")
        if self.images_per_identity < 2:
            raise ValidationError(f"images_per_identity must be >= 2, got {self.images_per_identity}")
        if self.num_cameras < 2:
            raise ValidationError(f"num_cameras must be >= 2, got {self.num_cameras}")
        if self.height < 1 or self.width < 2 or self.channels < 1:
            raise ValidationError(f"invalid image shape {(self.channels, self.height, self.width)}")
        if not 0.0 <= self.asymmetry_strength <= 1.0:
            raise ValidationError(f"asymmetry_strength must lie in [0, 1], got {self.asymmetry_strength}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValidationError(f"mirror_prob must lie in [0, 1], got {self.mirror_prob}")


@dataclass
class Sample:
    image: np.ndarray
    identity: int
    camera: int
    split: str = "train"

    def with_image(self, image: np.ndarray) -> "Sample":
        return replace(self, image=image)


@dataclass(frozen=True)
class AugmentParams:
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.4)
    erase_aspect_range: tuple[float, float] = (0.3, 3.3)
    grayscale_patch_prob: float = 0.2
    grayscale_patch_area_range: tuple[float, float] = (0.02, 0.4)

    def validate(self) -> None:
        for name in ("flip_prob", "erase_prob", "grayscale_patch_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value}")
        for name in ("erase_area_range", "grayscale_patch_area_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ValidationError(f"{name} must satisfy 0 < min <= max <= 1, got {(lo, hi)}")
        lo, hi = self.erase_aspect_range
        if not (0.0 < lo <= hi):
            raise ValidationError(f"erase_aspect_range must satisfy 0 < min <= max, got {(lo, hi)}")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        d = dict(d)
        for key in ("erase_area_range", "erase_aspect_range", "grayscale_patch_area_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, ...], passes: int = 2) -> np.ndarray:
    """Low-frequency random field in roughly [-1, 1]."""
    out = rng.standard_normal(shape)
    for _ in range(passes):
        out = (out + np.roll(out, 1, axis=-1) + np.roll(out, -1, axis=-1)) / 3.0
        out = (out + np.roll(out, 1, axis=-2) + np.roll(out, -1, axis=-2)) / 3.0
    return out / (np.abs(out).max() + 1e-12)


def _prototype(rng: np.random.Generator, spec: DatasetSpec, base: np.ndarray) -> np.ndarray:
    """A float prototype whose mirror asymmetry scales with ``asymmetry_strength``.

    The symmetric part is the dataset-wide ``base`` silhouette shifted by
    identity-specific band colours and a mirrored texture; the antisymmetric
    part is a smooth field ``d`` with ``flip(d) == -d`` plus a one-sided
    accessory blob.
    """
    c, h, w = spec.channels, spec.height, spec.width
    sym = base.copy()
    for rows in np.array_split(np.arange(h), 4):
        sym[:, rows, :] += rng.normal(0.0, SYMMETRIC_CONTRAST, size=(c, 1, 1))
    texture = _smooth_noise(rng, (c, h, w))
    sym += 0.5 * SYMMETRIC_CONTRAST * (texture + texture[:, :, ::-1])

    asym = _smooth_noise(rng, (c, h, w), passes=1)
    top = rng.integers(h // 4, max(h // 4 + 1, 3 * h // 4 - h // 6))
    side = slice(0, max(1, w // 3))
    asym[:, top : top + max(1, h // 6), side] += rng.choice([-2.0, 2.0], size=(c, 1, 1))
    asym = 0.5 * (asym - asym[:, :, ::-1])
    return sym + spec.asymmetry_strength * ASYMMETRIC_CONTRAST * asym


def _base_silhouette(rng: np.random.Generator, spec: DatasetSpec) -> np.ndarray:
    base = np.empty((spec.channels, spec.height, spec.width))
    for rows in np.array_split(np.arange(spec.height), 4):
        base[:, rows, :] = rng.uniform(80, 175, size=(spec.channels, 1, 1))
    return base


def generate_dataset(spec: DatasetSpec) -> list[Sample]:
    """Draw ``num_identities * images_per_identity`` labelled samples.

    Each image is its identity's prototype, possibly mirrored, with a
    per-camera colour gain/offset and Gaussian pixel noise.  Every identity
    appears under at least two cameras.  Output depends only on ``spec``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    gains = rng.uniform(0.8, 1.2, size=(spec.num_cameras, spec.channels, 1, 1))
    offsets = rng.uniform(-25, 25, size=(spec.num_cameras, spec.channels, 1, 1))
    # Symmetric vertical illumination gradient per camera.
    ramp = np.linspace(-1.0, 1.0, spec.height)[None, :, None]
    ramps = rng.uniform(-15, 15, size=(spec.num_cameras, 1, 1, 1)) * ramp

    base = _base_silhouette(rng, spec)
    samples = []
    for ident in range(spec.num_identities):
        proto = _prototype(rng, spec, base)
        cams = rng.integers(0, spec.num_cameras, size=spec.images_per_identity)
        if np.all(cams == cams[0]):
            cams[1] = (cams[0] + 1) % spec.num_cameras
        for cam in cams:
            img = proto[:, :, ::-1] if rng.random() < spec.mirror_prob else proto
            img = img * gains[cam] + offsets[cam] + ramps[cam]
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
            img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            samples.append(Sample(np.ascontiguousarray(img), ident, int(cam)))
    return samples


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    """Mirror along the width axis; works on (C, H, W) and (N, C, H, W)."""
    return np.ascontiguousarray(image[..., ::-1])


def random_horizontal_flip(image: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < prob:
        return horizontal_flip(image)
    return image


def _random_rectangle(
    rng: np.random.Generator, height: int, width: int, area_range, aspect_range
) -> tuple[int, int, int, int] | None:
    area = height * width
    for _ in range(ERASE_ATTEMPTS):
        target = rng.uniform(*area_range) * area
        aspect = rng.uniform(*aspect_range)
        h = int(round(math.sqrt(target * aspect)))
        w = int(round(math.sqrt(target / aspect)))
        if 0 < h <= height and 0 < w <= width:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return None


def random_erasing(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Replace a random rectangle with uniform random pixel values."""
    if rng.random() >= params.erase_prob:
        return image
    _, height, width = image.shape
    rect = _random_rectangle(rng, height, width, params.erase_area_range, params.erase_aspect_range)
    if rect is None:
        return image
    top, left, h, w = rect
    out = image.copy()
    out[:, top : top + h, left : left + w] = rng.integers(0, 256, size=(image.shape[0], h, w), dtype=np.uint8)
    return out


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Luma of a (3, ...) uint8 block, rounded, broadcast back to 3 channels."""
    weights = np.array(LUMA).reshape((3,) + (1,) * (pixels.ndim - 1))
    gray = np.rint((pixels.astype(np.float64) * weights).sum(axis=0))
    gray = np.clip(gray, 0, 255).astype(np.uint8)
    return np.broadcast_to(gray, pixels.shape).copy()


def random_grayscale_patch(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    if params.grayscale_patch_prob > 0 and image.shape[0] != 3:
        raise ValidationError(f"grayscale patch needs 3 channels, got {image.shape[0]}")
    if rng.random() >= params.grayscale_patch_prob:
        return image
    _, height, width = image.shape
    rect = _random_rectangle(rng, height, width, params.grayscale_patch_area_range, params.erase_aspect_range)
    if rect is None:
        return image
    top, left, h, w = rect
    out = image.copy()
    out[:, top : top + h, left : left + w] = to_grayscale(image[:, top : top + h, left : left + w])
    return out


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator, flip: bool = True) -> np.ndarray:
    """Training augmentation chain: flip, grayscale patch, erasing.

    ``flip=False`` drops the random flip (used when both orientations are fed
    to the network anyway).
    """
    if flip:
        image = random_horizontal_flip(image, params.flip_prob, rng)
    if image.shape[0] == 3:
        image = random_grayscale_patch(image, params, rng)
    return random_erasing(image, params, rng)


def split_dataset(
    samples: list[Sample],
    rng: np.random.Generator,
    query_frac: float = 0.5,
    test_frac: float = 0.5,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Partition identities into train/test, then test samples into query/gallery.

    Each test identity contributes at least one query and one gallery sample.
    Queries are drawn greedily so that every query keeps a same-identity
    gallery sample from another camera; an identity may therefore end up
    with fewer than ``query_frac`` of its samples as queries.
    """
    if not 0.0 < query_frac < 1.0:
        raise ValidationError(f"query_frac must lie in (0, 1), got {query_frac}")
    by_id: dict[int, list[Sample]] = {}
    for s in samples:
        by_id.setdefault(s.identity, []).append(s)
    for ident, group in by_id.items():
        if len(group) < 2:
            raise ValidationError(f"identity {ident} has {len(group)} sample(s); need >= 2")

    ids = sorted(by_id)
    order = rng.permutation(len(ids))
    n_test = min(len(ids) - 1, max(1, int(round(test_frac * len(ids)))))
    test_ids = {ids[i] for i in order[:n_test]}

    train, query, gallery = [], [], []
    for ident in ids:
        group = by_id[ident]
        if ident not in test_ids:
            train.extend(replace(s, split="train") for s in group)
            continue
        perm = [group[i] for i in rng.permutation(len(group))]
        first = perm[0]
        if all(s.camera == first.camera for s in perm):
            raise ValidationError(f"identity {ident} is seen by a single camera; no cross-camera positive possible")
        n_query = min(len(group) - 1, max(1, int(round(query_frac * len(group)))))
        q, g = [first], perm[1:]
        for cand in perm[1:]:
            if len(q) >= n_query:
                break
            rest = [s for s in g if s is not cand]
            if all(any(s.camera != x.camera for s in rest) for x in q + [cand]):
                q.append(cand)
                g = rest
        query.extend(replace(s, split="query") for s in q)
        gallery.extend(replace(s, split="gallery") for s in g)
    return train, query, gallery
