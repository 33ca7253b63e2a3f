"""PK sampling, the baseline and FlipReID training steps, Adam, and the loop.

Baseline step: each sample is augmented (random flip included) into one
image; triplet and cross-entropy act on that image's features.

FlipReID step: each sample is augmented without the random flip, then both
the image and its mirror go through the shared network in one 2N batch.
Triplet loss and the classifier heads consume the mean of the two feature
vectors; the optional flipping loss penalises their squared difference.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .losses import LossReport, LossWeights, batch_hard_triplet, categorical_cross_entropy, flipping_loss, total_loss
from .model import (
    ModelConfig,
    ReIDModel,
    batchnorm_dense_softmax,
    embed_backward,
    embed_forward,
    head_backward,
    preprocess,
    split_features,
)
from .synth import AugmentParams, Sample, ValidationError, augment, horizontal_flip

log = logging.getLogger(__name__)

MODES = ("baseline", "flipreid")
MIN_GEM_P = 0.5


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, report: LossReport):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class PKBatchSpec:
    P: int = 4
    K: int = 4

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValidationError(f"PK batches need P >= 2 and K >= 2, got P={self.P}, K={self.K}")


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch: PKBatchSpec = field(default_factory=PKBatchSpec)
    epochs: int = 30
    steps_per_epoch: int = 5
    learning_rate: float = 3e-4
    adam: AdamHyper = field(default_factory=AdamHyper)
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentParams = field(default_factory=AugmentParams)
    mode: str = "baseline"
    use_flipping_loss: bool = False
    seed: int = 0
    # Architecture knobs forwarded to ModelConfig (num_classes is derived).
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.use_flipping_loss and self.mode != "flipreid":
            raise ValidationError("the flipping loss is only available in flipreid mode")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValidationError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be nonnegative")
        self.augment.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "batch" in d:
            d["batch"] = PKBatchSpec(**d["batch"])
        if "adam" in d:
            d["adam"] = AdamHyper(**d["adam"])
        if "loss" in d:
            d["loss"] = LossWeights(**d["loss"])
        if "augment" in d:
            d["augment"] = AugmentParams.from_dict(d["augment"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValidationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "num_classes": num_classes})


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([s[key] for s in self.steps])


# --- sampling ------------------------------------------------------------------

def pk_sample(train: list[Sample], spec: PKBatchSpec, rng: np.random.Generator) -> list[Sample]:
    """P identities, K samples each; identities with < K samples repeat."""
    by_id: dict[int, list[Sample]] = {}
    for s in train:
        by_id.setdefault(s.identity, []).append(s)
    ids = sorted(by_id)
    if len(ids) < spec.P:
        raise ValidationError(f"need at least P={spec.P} train identities, have {len(ids)}")
    chosen = rng.choice(len(ids), size=spec.P, replace=False)
    batch = []
    for c in chosen:
        group = by_id[ids[c]]
        idx = rng.choice(len(group), size=spec.K, replace=len(group) < spec.K)
        batch.extend(group[i] for i in idx)
    return batch


# --- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def optimizer_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float, hyper: AdamHyper = AdamHyper()
) -> None:
    """Bias-corrected Adam, updating ``params`` and ``state`` in place."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


# --- step losses ----------------------------------------------------------------

@dataclass
class StepResult:
    report: LossReport
    grads: dict[str, np.ndarray]
    stats: dict
    f_orig: np.ndarray
    f_flip: np.ndarray | None = None


def _head_losses(model: ReIDModel, branch_feats: list[np.ndarray], labels: np.ndarray, weights: LossWeights, grads: dict):
    """Classifier heads on ``branch_feats``; returns ce, per-branch feature grads, stats."""
    probs, caches, stats = [], [], {}
    for name, emb in zip(model.config.branches, branch_feats):
        pr, _, cache, st = batchnorm_dense_softmax(model, name, emb, "train")
        probs.append(pr)
        caches.append(cache)
        stats[name] = st
    ce, grad_logits = categorical_cross_entropy(probs, labels)
    feat_grads = [
        head_backward(model, name, cache, weights.w_ce * g, grads)
        for name, cache, g in zip(model.config.branches, caches, grad_logits)
    ]
    return ce, feat_grads, stats


def baseline_step_loss(model: ReIDModel, images: np.ndarray, labels: np.ndarray, weights: LossWeights) -> StepResult:
    """Loss and exact gradients for one already-augmented baseline batch."""
    x = preprocess(images, model.config.preprocess)
    embeddings, cache = embed_forward(model, x)
    features = np.concatenate(embeddings, axis=1)
    grads = model.zero_grads()
    trip, g_trip, active = batch_hard_triplet(features, labels, weights.triplet_margin, weights.soft_margin)
    ce, head_grads, stats = _head_losses(model, embeddings, labels, weights, grads)
    g_emb = [weights.w_triplet * g + h for g, h in zip(split_features(model, g_trip), head_grads)]
    embed_backward(model, cache, g_emb, grads)
    report = total_loss(trip, ce, weights, None, active)
    return StepResult(report, grads, stats, features)


def flipreid_step_loss(
    model: ReIDModel, images: np.ndarray, labels: np.ndarray, weights: LossWeights, use_flipping_loss: bool
) -> StepResult:
    """Loss and exact gradients for one already-augmented FlipReID batch.

    ``images`` are the augmented originals; their mirrors are built here so
    the second view is an exact reflection of the first.
    """
    n = images.shape[0]
    both = np.concatenate([images, horizontal_flip(images)], axis=0)
    x = preprocess(both, model.config.preprocess)
    embeddings, cache = embed_forward(model, x)
    orig = [e[:n] for e in embeddings]
    flip = [e[n:] for e in embeddings]
    mean = [0.5 * (a + b) for a, b in zip(orig, flip)]
    f_orig = np.concatenate(orig, axis=1)
    f_flip = np.concatenate(flip, axis=1)

    grads = model.zero_grads()
    trip, g_trip, active = batch_hard_triplet(np.concatenate(mean, axis=1), labels, weights.triplet_margin, weights.soft_margin)
    ce, head_grads, stats = _head_losses(model, mean, labels, weights, grads)
    g_mean = [weights.w_triplet * g + h for g, h in zip(split_features(model, g_trip), head_grads)]
    g_orig = [0.5 * g for g in g_mean]
    g_flip = [0.5 * g for g in g_mean]
    flip_value = None
    if use_flipping_loss:
        flip_value, go, gf = flipping_loss(f_orig, f_flip)
        g_orig = [a + weights.w_flip * b for a, b in zip(g_orig, split_features(model, go))]
        g_flip = [a + weights.w_flip * b for a, b in zip(g_flip, split_features(model, gf))]
    g_emb = [np.concatenate([a, b], axis=0) for a, b in zip(g_orig, g_flip)]
    embed_backward(model, cache, g_emb, grads)
    report = total_loss(trip, ce, weights, flip_value, active)
    return StepResult(report, grads, stats, f_orig, f_flip)


# --- steps ------------------------------------------------------------------------

def _augmented(batch: list[Sample], params: AugmentParams, rng: np.random.Generator, flip: bool) -> np.ndarray:
    return np.stack([augment(s.image, params, rng, flip=flip) for s in batch])


def _apply(model: ReIDModel, result: StepResult, opt: AdamState, cfg: TrainConfig, step_index: int) -> LossReport:
    report = result.report
    if not all(math.isfinite(v) for v in report.as_record().values()):
        raise TrainingDivergedError(step_index, report)
    optimizer_step(model.params, result.grads, opt, cfg.learning_rate, cfg.adam)
    for name in model.params:
        if name.endswith("gem_p"):
            np.maximum(model.params[name], MIN_GEM_P, out=model.params[name])
    model.update_running_stats(result.stats)
    return report


def train_step_baseline(
    model: ReIDModel, batch: list[Sample], labels: np.ndarray, cfg: TrainConfig,
    rng: np.random.Generator, opt: AdamState, step_index: int = 0,
) -> LossReport:
    images = _augmented(batch, cfg.augment, rng, flip=True)
    return _apply(model, baseline_step_loss(model, images, labels, cfg.loss), opt, cfg, step_index)


def train_step_flipreid(
    model: ReIDModel, batch: list[Sample], labels: np.ndarray, cfg: TrainConfig,
    rng: np.random.Generator, opt: AdamState, step_index: int = 0,
) -> LossReport:
    images = _augmented(batch, cfg.augment, rng, flip=False)
    result = flipreid_step_loss(model, images, labels, cfg.loss, cfg.use_flipping_loss)
    return _apply(model, result, opt, cfg, step_index)


# --- loop ---------------------------------------------------------------------------

def label_map(train: list[Sample]) -> dict[int, int]:
    return {ident: i for i, ident in enumerate(sorted({s.identity for s in train}))}


def rng_streams(seed: int) -> tuple[np.random.Generator, ...]:
    """Independent (init, sampling, augmentation) generators for one run."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def train(
    cfg: TrainConfig,
    train_samples: list[Sample],
    checkpoint_path: str | Path | None = None,
    history_path: str | Path | None = None,
    on_epoch: Callable[[int, ReIDModel], dict] | None = None,
) -> tuple[ReIDModel, TrainHistory]:
    """Train from scratch; fully determined by ``cfg`` and the samples.

    ``history_path`` receives one JSON line per step.  ``on_epoch`` may
    return an evaluation snapshot that is stored in the history.
    """
    from .formats import save_checkpoint

    labels_of = label_map(train_samples)
    init_rng, sample_rng, aug_rng = rng_streams(cfg.seed)
    model = ReIDModel.initialize(cfg.model_config(len(labels_of)), init_rng)
    opt = AdamState.zeros_like(model.params)
    step_fn = train_step_flipreid if cfg.mode == "flipreid" else train_step_baseline
    history = TrainHistory()

    sink = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(history_path, "w")
    try:
        step = 0
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            for _ in range(cfg.steps_per_epoch):
                batch = pk_sample(train_samples, cfg.batch, sample_rng)
                labels = np.array([labels_of[s.identity] for s in batch])
                report = step_fn(model, batch, labels, cfg, aug_rng, opt, step)
                record = {"step": step, "epoch": epoch, **report.as_record()}
                history.steps.append(record)
                if sink is not None:
                    sink.write(json.dumps(record) + "\n")
                step += 1
            history.epoch_seconds.append(time.perf_counter() - start)
            if on_epoch is not None:
                history.snapshots.append({"epoch": epoch, **on_epoch(epoch, model)})
            log.debug("epoch %d: total=%.4f", epoch, history.steps[-1]["total"])
    finally:
        if sink is not None:
            sink.close()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, history
