"""Command-line entry point.

Exit codes: 0 success, 1 training diverged, 2 validation failure, 3 some
experiment cells failed, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import PROTOCOLS, EvalReport, embed, evaluate
from .experiment import (
    VARIANTS,
    ExperimentPlan,
    default_benchmark,
    eval_embeddings,
    ingest_manifest,
    rerank_embeddings,
    run_experiment,
)
from .formats import (
    FormatError,
    atomic_write,
    load_checkpoint,
    read_embeddings,
    read_matrix,
    write_dataset,
    write_embeddings,
    write_matrix,
)
from .losses import SamplerContractError
from .model import ConfigurationError
from .plotting import plot_cmc
from .reranking import RerankParams, rerank
from .synth import DatasetSpec, ValidationError, generate_dataset, split_dataset
from .training import TrainConfig, TrainingDivergedError, train

EXIT_OK, EXIT_DIVERGED, EXIT_INVALID, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("flipreid")


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return doc


def _dataset_spec(doc: dict, seed: int | None) -> DatasetSpec:
    base, _ = default_benchmark()
    d = doc.get("dataset", {})
    unknown = set(d) - set(DatasetSpec.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown dataset fields: {sorted(unknown)}")
    spec = replace(base, **d)
    if seed is not None:
        spec = replace(spec, seed=seed)
    spec.validate()
    return spec


def _train_config(doc: dict, args) -> TrainConfig:
    _, base = default_benchmark()
    merged = {**base.to_dict(), **doc.get("train", {})}
    cfg = TrainConfig.from_dict(merged)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        updates["mode"] = args.mode
    if getattr(args, "flip_loss", None) is not None:
        updates["use_flipping_loss"] = args.flip_loss == "on"
    return replace(cfg, **updates) if updates else cfg


def _rerank_params(doc: dict, args) -> RerankParams:
    d = dict(doc.get("rerank_params", {}))
    for key, attr in (("k1", "k1"), ("k2", "k2"), ("lambda_value", "lambda_value")):
        value = getattr(args, attr, None)
        if value is not None:
            d[key] = value
    return RerankParams(**d)


def _write_report(out: Path, report: EvalReport, name: str = "report") -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / f"{name}.json", (report.to_json() + "\n").encode())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "cmc"])
    for k, c in enumerate(report.cmc, start=1):
        w.writerow([k, f"{c:.6f}"])
    atomic_write(out / f"{name}_cmc.csv", buf.getvalue().encode())
    plot_cmc({name: report.cmc[:20]}, out / f"{name}_cmc.png")


# --- subcommands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    doc = _load_json(args.config)
    spec = _dataset_spec(doc, args.seed)
    samples = generate_dataset(spec)
    train_set, query, gallery = split_dataset(samples, np.random.default_rng(spec.seed), args.query_frac)
    manifest = write_dataset(args.out, train_set + query + gallery)
    print(f"wrote {len(samples)} images ({len(train_set)} train, {len(query)} query, {len(gallery)} gallery) to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(_load_json(args.config), args)
    train_set, _, _ = ingest_manifest(args.manifest, require_train=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "train_config.json", (cfg.to_json() + "\n").encode())
    _, history = train(cfg, train_set, out / "model.frmc", out / "history.jsonl")
    last = history.steps[-1] if history.steps else {}
    print(f"trained {cfg.mode} (flip loss {'on' if cfg.use_flipping_loss else 'off'}) for {len(history.steps)} steps; "
          f"final total loss {last.get('total', float('nan')):.4f}; checkpoint {out / 'model.frmc'}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = load_checkpoint(args.checkpoint)
    _, query, gallery = ingest_manifest(args.manifest)
    out = Path(args.out)
    for part, samples in (("query", query), ("gallery", gallery)):
        write_embeddings(out / f"{part}.frem", embed(model, samples, args.inference))
    print(f"wrote {len(query)} query and {len(gallery)} gallery embeddings ({args.inference}) to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params = _rerank_params({}, args)
    if args.distances is not None:
        query, gallery = read_embeddings(args.query), read_embeddings(args.gallery)
        report = evaluate(query, gallery, args.max_rank, distances=read_matrix(args.distances), protocol=args.protocol)
    else:
        report = eval_embeddings(args.query, args.gallery, args.rerank == "on", params, args.protocol)
    _write_report(Path(args.out), report)
    print(f"mAP {report.mAP:.4f}  rank-1 {report.rank1:.4f}  valid queries {report.num_valid_queries}")
    return EXIT_OK


def cmd_rerank(args) -> int:
    params = _rerank_params({}, args)
    if args.query is not None and args.gallery is not None:
        q, g = read_embeddings(args.query), read_embeddings(args.gallery)
        out = rerank_embeddings(q, g, params)
    elif args.q_g and args.q_q and args.g_g:
        out = rerank(read_matrix(args.q_g), read_matrix(args.q_q), read_matrix(args.g_g), params)
    else:
        raise ValidationError("rerank needs --query/--gallery embeddings or all of --q-g, --q-q, --g-g matrices")
    target = Path(args.out)
    if target.suffix != ".frdm":
        target = target / "reranked.frdm"
    write_matrix(target, out)
    print(f"wrote re-ranked {out.shape[0]}x{out.shape[1]} distances to {target}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    doc = _load_json(args.config)
    base = _train_config(doc, argparse.Namespace(seed=None))
    seeds = tuple(args.seed) if args.seed else tuple(doc.get("seeds", (0,)))
    variants = tuple(doc.get("variants", VARIANTS))
    if args.mode is not None or args.flip_loss is not None:
        mode = args.mode or "flipreid"
        flip = args.flip_loss == "on"
        variants = tuple(v for v, d in VARIANTS.items() if d["mode"] == mode and (args.flip_loss is None or d["use_flipping_loss"] == flip))
        if not variants:
            raise ValidationError(f"no variant matches --mode {mode} --flip-loss {args.flip_loss}")
    modes = (args.inference,) if args.inference else tuple(doc.get("modes", ("single", "double")))
    rerank_on = doc.get("rerank", False) if args.rerank is None else args.rerank == "on"
    manifest = args.manifest or doc.get("manifest")
    plan = ExperimentPlan(
        out_dir=Path(args.out),
        base_config=base,
        variants=variants,
        modes=modes,
        seeds=seeds,
        rerank=rerank_on,
        rerank_params=_rerank_params(doc, args),
        dataset=None if manifest else _dataset_spec(doc, None),
        manifest=Path(manifest) if manifest else None,
        query_frac=doc.get("query_frac", 0.25),
    )
    result = run_experiment(plan, figures=not args.no_figures)
    for d in result.summary:
        print(f"{d['label']:>4}  {d['variant']:<20} {d['mode']:<6} rerank={'on ' if d['rerank'] else 'off'}"
              f"  mAP {d['mAP_mean']:.4f} +/- {d['mAP_std']:.4f}  rank-1 {d['rank1_mean']:.4f}  failed {d['failed']}")
    if result.failed_cells:
        print(f"{result.failed_cells} result rows failed; see {plan.out_dir / 'results.json'}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _rerank_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k1", type=int, default=None, help="k-reciprocal neighbourhood size (default 20)")
    p.add_argument("--k2", type=int, default=None, help="local query expansion size (default 6)")
    p.add_argument("--lambda", dest="lambda_value", type=float, default=None, help="weight of the original distance (default 0.3)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flipreid", description="Flip-consistent re-identification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    p.add_argument("--config", help="JSON with a 'dataset' object")
    p.add_argument("--seed", type=int)
    p.add_argument("--query-frac", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON with a 'train' object")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["baseline", "flipreid"])
    p.add_argument("--flip-loss", choices=["on", "off"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed the query and gallery splits of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--inference", choices=["single", "double"], default="single")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", help="mAP and CMC from FREM embedding files")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--distances", help="precomputed FRDM query x gallery distances")
    p.add_argument("--rerank", choices=["on", "off"], default="off")
    p.add_argument("--protocol", choices=PROTOCOLS, default="standard")
    p.add_argument("--max-rank", type=int, default=50)
    _rerank_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rerank", help="k-reciprocal re-ranking of a distance matrix")
    p.add_argument("--query")
    p.add_argument("--gallery")
    p.add_argument("--q-g")
    p.add_argument("--q-q")
    p.add_argument("--g-g")
    _rerank_flags(p)
    p.add_argument("--out", required=True, help="output .frdm file or directory")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("experiment", help="run the variant x inference comparison table")
    p.add_argument("--config", help="JSON plan: dataset, train, variants, modes, seeds, rerank, rerank_params")
    p.add_argument("--seed", type=int, action="append", help="repeat for several seeds")
    p.add_argument("--mode", choices=["baseline", "flipreid"])
    p.add_argument("--flip-loss", choices=["on", "off"])
    p.add_argument("--inference", choices=["single", "double"])
    p.add_argument("--rerank", choices=["on", "off"])
    p.add_argument("--manifest")
    p.add_argument("--no-figures", action="store_true")
    _rerank_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError, SamplerContractError, FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
