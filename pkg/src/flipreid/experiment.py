"""Experiment runner: the train-side variants crossed with inference modes.

A cell is one (variant, seed) pair.  Each cell trains a model, writes its
checkpoint, embeds query and gallery under every requested inference mode,
and evaluates (optionally re-ranked).  Cells are independent, so they may
run in separate processes; ``FLIPREID_THREADS`` caps how many.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluation import EmbeddingSet, EvalReport, embed, evaluate, flip_gap
from .formats import atomic_write, file_sha256, read_embeddings, read_manifest, write_embeddings
from .losses import LossWeights, pairwise_euclidean
from .reranking import RerankParams, rerank
from .synth import DatasetSpec, Sample, ValidationError, generate_dataset, split_dataset
from .training import TrainConfig, train

log = logging.getLogger(__name__)

INFERENCE_MODES = ("single", "double")
CSV_COLUMNS = ["variant", "mode", "rerank", "seed", "mAP", "rank1"]
CMC_KEEP = 20

# Train-side variants and how they map onto TrainConfig.
VARIANTS = {
    "baseline": {"mode": "baseline", "use_flipping_loss": False},
    "flipreid": {"mode": "flipreid", "use_flipping_loss": False},
    "flipreid+flip-loss": {"mode": "flipreid", "use_flipping_loss": True},
}
_FAMILY = {"baseline": "1", "flipreid": "2", "flipreid+flip-loss": "3"}


def row_label(variant: str, mode: str, rerank_on: bool) -> str:
    """Table row label: family.1 single, family.2 double, family.3 re-ranked double."""
    family = _FAMILY.get(variant, "?")
    if rerank_on:
        return f"{family}.3" if mode == "double" else f"{family}.1r"
    return f"{family}.{1 if mode == 'single' else 2}"


def default_benchmark() -> tuple[DatasetSpec, TrainConfig]:
    """Synthetic benchmark used by the acceptance suite and ``experiment``.

    Identity information sits mostly in the left-right asymmetric part of
    the images, so a model that ignores orientation loses accuracy.
    """
    spec = DatasetSpec(num_identities=20, images_per_identity=12, num_cameras=3, asymmetry_strength=0.8, noise_std=35.0)
    cfg = TrainConfig(
        epochs=30,
        steps_per_epoch=10,
        learning_rate=3e-3,
        loss=LossWeights(triplet_margin=1.0, w_flip=20.0),
        model={"block_channels": [16, 32], "reduced_dim": 16},
    )
    return spec, cfg


def variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return replace(base, seed=seed, **VARIANTS[variant])


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


@dataclass
class ExperimentPlan:
    out_dir: Path
    base_config: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[str, ...] = tuple(VARIANTS)
    modes: tuple[str, ...] = INFERENCE_MODES
    seeds: tuple[int, ...] = (0,)
    rerank: bool = False
    rerank_params: RerankParams = field(default_factory=RerankParams)
    dataset: DatasetSpec | None = None
    manifest: Path | None = None
    query_frac: float = 0.25

    def validate(self) -> None:
        if not self.variants or not self.modes or not self.seeds:
            raise ValidationError("a plan needs at least one variant, one inference mode and one seed")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValidationError(f"unknown variant {v!r}; expected one of {sorted(VARIANTS)}")
        for m in self.modes:
            if m not in INFERENCE_MODES:
                raise ValidationError(f"unknown inference mode {m!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValidationError("seeds must be distinct")
        if (self.dataset is None) == (self.manifest is None):
            raise ValidationError("give exactly one of a synthetic dataset spec or a manifest")
        if self.dataset is not None:
            self.dataset.validate()
        if not 0.0 < self.query_frac < 1.0:
            raise ValidationError("query_frac must lie in (0, 1)")

    def describe(self) -> dict:
        return {
            "base_config": self.base_config.to_dict(),
            "variants": list(self.variants),
            "modes": list(self.modes),
            "seeds": list(self.seeds),
            "rerank": self.rerank,
            "rerank_params": asdict(self.rerank_params),
            "dataset": asdict(self.dataset) if self.dataset is not None else None,
            "manifest": str(self.manifest) if self.manifest is not None else None,
            "query_frac": self.query_frac,
        }


@dataclass
class ResultRow:
    variant: str
    mode: str
    rerank: bool
    seed: int
    mAP: float
    rank1: float
    label: str
    status: str = "ok"
    error: str = ""
    config_hash: str = ""
    checkpoint: str = ""
    embedding_sha256: dict = field(default_factory=dict)
    flip_gap: float = math.nan
    cmc: list = field(default_factory=list)

    def csv_row(self) -> list[str]:
        return [self.variant, self.mode, "on" if self.rerank else "off", str(self.seed), _fmt(self.mAP), _fmt(self.rank1)]


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    summary: list[dict]
    out_dir: Path

    @property
    def failed_cells(self) -> int:
        return sum(r.status != "ok" for r in self.rows)

    def cell(self, variant: str, mode: str, seed: int, rerank_on: bool = False) -> ResultRow:
        for r in self.rows:
            if (r.variant, r.mode, r.seed, r.rerank) == (variant, mode, seed, rerank_on):
                return r
        raise KeyError((variant, mode, seed, rerank_on))


def _fmt(x: float) -> str:
    return "nan" if not math.isfinite(x) else f"{x:.6f}"


# --- data -----------------------------------------------------------------------

def ingest_manifest(path: str | Path, require_train: bool = False) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Load a manifest and check that it can drive evaluation.

    With ``require_train`` the train split must also support PK sampling:
    at least two identities, each with at least two images.
    """
    samples, lines = read_manifest(path, with_lines=True)
    if not samples:
        raise ValidationError(f"{path}: manifest has no samples")
    parts = {"train": [], "query": [], "gallery": []}
    first_line: dict[tuple[str, int], int] = {}
    for s, line in zip(samples, lines):
        parts[s.split].append(s)
        first_line.setdefault((s.split, s.identity), line)

    train_ids = {s.identity for s in parts["train"]}
    test_ids = {s.identity for s in parts["query"]} | {s.identity for s in parts["gallery"]}
    for ident in sorted(train_ids & test_ids):
        line = first_line.get(("query", ident), first_line.get(("gallery", ident)))
        raise ValidationError(f"{path}:{line}: identity {ident} appears in both the train and test splits")
    if require_train:
        if len(train_ids) < 2:
            raise ValidationError(f"{path}: training needs at least 2 identities, found {len(train_ids)}")
        counts = {i: 0 for i in train_ids}
        for s in parts["train"]:
            counts[s.identity] += 1
        for ident, n in sorted(counts.items()):
            if n < 2:
                raise ValidationError(
                    f"{path}:{first_line[('train', ident)]}: train identity {ident} has a single image; need >= 2"
                )
    if not parts["query"] or not parts["gallery"]:
        raise ValidationError(f"{path}: need at least one query and one gallery sample")
    gallery_ids = {s.identity for s in parts["gallery"]}
    for ident in sorted({s.identity for s in parts["query"]} - gallery_ids):
        raise ValidationError(f"{path}:{first_line[('query', ident)]}: query identity {ident} has no gallery entry")
    return parts["train"], parts["query"], parts["gallery"]


def synthetic_splits(spec: DatasetSpec, seed: int, query_frac: float = 0.25):
    """Generate the benchmark for ``seed`` and split it; deterministic in both."""
    samples = generate_dataset(replace(spec, seed=seed))
    return split_dataset(samples, np.random.default_rng(seed), query_frac)


# --- evaluation helpers ---------------------------------------------------------------

def rerank_embeddings(query: EmbeddingSet, gallery: EmbeddingSet, params: RerankParams) -> np.ndarray:
    return rerank(
        pairwise_euclidean(query.features, gallery.features),
        pairwise_euclidean(query.features),
        pairwise_euclidean(gallery.features),
        params,
    )


def eval_embeddings(
    query_file: str | Path,
    gallery_file: str | Path,
    rerank_on: bool = False,
    params: RerankParams = RerankParams(),
    protocol: str = "standard",
) -> EvalReport:
    """Evaluate two FREM files without any model."""
    query = read_embeddings(query_file)
    gallery = read_embeddings(gallery_file)
    if query.dim != gallery.dim:
        raise ValidationError(f"query embeddings have dim {query.dim} but gallery embeddings have dim {gallery.dim}")
    distances = rerank_embeddings(query, gallery, params) if rerank_on else None
    return evaluate(query, gallery, distances=distances, protocol=protocol)


# --- cells --------------------------------------------------------------------------

def _run_cell(plan: ExperimentPlan, variant: str, seed: int, data=None) -> list[ResultRow]:
    cfg = variant_config(plan.base_config, variant, seed)
    chash = config_hash(cfg)
    stem = f"{variant}_s{seed}"
    out = Path(plan.out_dir)
    try:
        if data is None:
            data = synthetic_splits(plan.dataset, seed, plan.query_frac)
        train_set, query, gallery = data
        ckpt_rel = f"checkpoints/{stem}.frmc"
        model, _ = train(cfg, train_set, out / ckpt_rel, out / f"history/{stem}.jsonl")
        gap = flip_gap(model, query + gallery)
        rows = []
        for mode in plan.modes:
            q_emb, g_emb = embed(model, query, mode), embed(model, gallery, mode)
            hashes = {}
            for part, emb in (("query", q_emb), ("gallery", g_emb)):
                rel = f"embeddings/{stem}_{mode}_{part}.frem"
                write_embeddings(out / rel, emb)
                hashes[part] = file_sha256(out / rel)
            settings = [False, True] if plan.rerank else [False]
            for rr in settings:
                distances = rerank_embeddings(q_emb, g_emb, plan.rerank_params) if rr else None
                report = evaluate(q_emb, g_emb, distances=distances)
                rows.append(
                    ResultRow(variant, mode, rr, seed, report.mAP, report.rank1, row_label(variant, mode, rr),
                              config_hash=chash, checkpoint=ckpt_rel, embedding_sha256=hashes, flip_gap=gap,
                              cmc=[float(c) for c in report.cmc[:CMC_KEEP]])
                )
        return rows
    except Exception as exc:  # a failed cell must not sink the whole run
        log.error("cell %s seed %d failed: %s", variant, seed, exc)
        rows = []
        for mode in plan.modes:
            for rr in ([False, True] if plan.rerank else [False]):
                rows.append(ResultRow(variant, mode, rr, seed, math.nan, math.nan, row_label(variant, mode, rr),
                                      status="failed", error=f"{type(exc).__name__}: {exc}", config_hash=chash))
        return rows


def _cell_job(args):
    return _run_cell(*args)


def worker_count() -> int:
    raw = os.environ.get("FLIPREID_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"FLIPREID_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"FLIPREID_THREADS must be a positive integer, got {raw!r}")
    return n


def summarize(rows: list[ResultRow]) -> list[dict]:
    """Mean and (population) standard deviation of each cell across seeds."""
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.variant, r.mode, r.rerank), []).append(r)
    out = []
    for (variant, mode, rr), members in groups.items():
        ok = [m for m in members if m.status == "ok"]
        maps = np.array([m.mAP for m in ok])
        r1 = np.array([m.rank1 for m in ok])
        out.append({
            "label": row_label(variant, mode, rr),
            "variant": variant,
            "mode": mode,
            "rerank": rr,
            "seeds": len(members),
            "failed": len(members) - len(ok),
            "mAP_mean": float(maps.mean()) if ok else math.nan,
            "mAP_std": float(maps.std()) if ok else math.nan,
            "rank1_mean": float(r1.mean()) if ok else math.nan,
            "rank1_std": float(r1.std()) if ok else math.nan,
            "flip_gap_mean": float(np.mean([m.flip_gap for m in ok])) if ok else math.nan,
        })
    out.sort(key=lambda d: d["label"])
    return out


def _csv(header: list[str], rows: list[list[str]]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def write_results(result: ExperimentResult, plan: ExperimentPlan) -> None:
    out = Path(result.out_dir)
    atomic_write(out / "results.csv", _csv(CSV_COLUMNS, [r.csv_row() for r in result.rows]))
    cols = ["label", "variant", "mode", "rerank", "seeds", "failed", "mAP_mean", "mAP_std", "rank1_mean", "rank1_std"]
    atomic_write(
        out / "summary.csv",
        _csv(cols, [[d[c] if not isinstance(d[c], float) else _fmt(d[c]) for c in cols] for d in result.summary]),
    )
    doc = {
        "plan": plan.describe(),
        "rows": [asdict(r) for r in result.rows],
        "summary": result.summary,
    }
    atomic_write(out / "results.json", (json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n").encode())


def _json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def run_experiment(plan: ExperimentPlan, figures: bool = True) -> ExperimentResult:
    """Run every (variant, seed) cell and write results, summary and figures."""
    plan.validate()
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = ingest_manifest(plan.manifest, require_train=True) if plan.manifest is not None else None
    jobs = [(plan, v, s, data) for s in plan.seeds for v in plan.variants]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_cell_job, jobs))
    else:
        chunks = [_cell_job(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    result = ExperimentResult(rows, summarize(rows), out)
    write_results(result, plan)
    if figures:
        from .plotting import save_report_figures

        save_report_figures(result, out)
    return result
