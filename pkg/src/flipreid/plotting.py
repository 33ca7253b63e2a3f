"""Report figures: mean mAP per table row and mean CMC curves.

Figures go to PNG files next to the CSV output.  The Agg backend is forced
so this works headless; PNG metadata is dropped so reruns give stable files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}
COLORS = {"baseline": "#7f7f7f", "flipreid": "#1f77b4", "flipreid+flip-loss": "#d62728"}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_map_bars(summary: list[dict], path: str | Path) -> Path:
    """Bar per table row with the across-seed standard deviation as error bar."""
    rows = [d for d in summary if np.isfinite(d["mAP_mean"])]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    x = np.arange(len(rows))
    ax.bar(
        x,
        [d["mAP_mean"] for d in rows],
        yerr=[d["mAP_std"] for d in rows],
        color=[COLORS.get(d["variant"], "#2ca02c") for d in rows],
        capsize=3,
    )
    ax.set_xticks(x, [f"{d['label']}\n{d['mode']}" for d in rows], fontsize=8)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1)
    ax.set_title("mAP by variant and inference mode")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, Path(path))


def plot_cmc(curves: dict[str, np.ndarray], path: str | Path) -> Path:
    """One line per labelled CMC curve (rank k on the x axis, from 1)."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for label, cmc in curves.items():
        cmc = np.asarray(cmc)
        ax.plot(np.arange(1, len(cmc) + 1), cmc, marker="o", markersize=3, label=label)
    ax.set_xlabel("rank k")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend(fontsize=7)
    return _save(fig, Path(path))


def mean_cmc(rows) -> dict[str, np.ndarray]:
    """Average the stored CMC prefixes of successful rows per table label."""
    groups: dict[str, list] = {}
    for r in rows:
        if r.status == "ok" and r.cmc:
            groups.setdefault(f"{r.label} {r.variant} {r.mode}", []).append(r.cmc)
    out = {}
    for label, cmcs in sorted(groups.items()):
        n = min(len(c) for c in cmcs)
        out[label] = np.mean([c[:n] for c in cmcs], axis=0)
    return out


def save_report_figures(result, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        plot_map_bars(result.summary, out_dir / "map_by_row.png"),
        plot_cmc(mean_cmc(result.rows), out_dir / "cmc.png"),
    ]
