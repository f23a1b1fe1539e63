"""Report rendering: delimited tables, JSONL records, and matplotlib figures.

Every evaluation path writes machine-readable output (TSV + JSONL) next to
rendered PNG figures so a run's quality can be judged from the report
directory alone.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalbench import GridSearchReport, intensity_histogram


def write_tsv(path: str | Path, columns: list[str], rows: list[list]) -> None:
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def fig_intensity_histograms(
    groups: dict[str, list[tuple[np.ndarray, bool]]],
    path: str | Path,
    bins: int = 100,
) -> None:
    """One panel per group of (volume, is_target) pairs; targets drawn red."""
    centers = np.linspace(-1.0, 1.0, bins + 1)[:-1] + 1.0 / bins
    n = len(groups)
    fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 3.2), squeeze=False)
    for ax, (title, volumes) in zip(axes[0], groups.items()):
        for data, is_target in volumes:
            hist = intensity_histogram(data, bins=bins)
            ax.plot(
                centers,
                hist,
                color="crimson" if is_target else "steelblue",
                alpha=0.9 if is_target else 0.35,
                lw=1.6 if is_target else 0.8,
            )
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("intensity")
        ax.set_ylabel("density")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_metric_summary(metric_rows: list[dict], path: str | Path) -> None:
    """Grouped bars of mean SSIM/PSNR/PCC/WD per method label."""
    methods = sorted({r["method"] for r in metric_rows})
    metrics = ("ssim", "psnr", "pcc", "wd")
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.4 * len(metrics), 3.0))
    for ax, metric in zip(axes, metrics):
        means = [np.mean([r[metric] for r in metric_rows if r["method"] == m]) for m in methods]
        stds = [np.std([r[metric] for r in metric_rows if r["method"] == m]) for m in methods]
        ax.bar(range(len(methods)), means, yerr=stds, color="slategray", capsize=3)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=20, fontsize=8)
        ax.set_title(metric.upper(), fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_cluster_summary(cluster_rows: list[dict], path: str | Path) -> None:
    """Inter/intra-site centroid distances before and after harmonization."""
    labels = [r["method"] for r in cluster_rows]
    inter = [r["inter_site"] for r in cluster_rows]
    intra = [r["intra_site"] for r in cluster_rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(1.8 * len(labels) + 2, 3.0))
    ax.bar(x - 0.18, inter, width=0.36, label="inter-site", color="indianred")
    ax.bar(x + 0.18, intra, width=0.36, label="intra-site", color="steelblue")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=15, fontsize=9)
    ax.set_ylabel("feature distance")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_grid_heatmap(report: GridSearchReport, path: str | Path) -> None:
    """WD heatmap over the (T_f, T_r) grid, best cell marked."""
    tf_values = sorted({c.t_forward for c in report.cells})
    tr_values = sorted({c.t_reverse for c in report.cells})
    grid = np.full((len(tr_values), len(tf_values)), np.nan)
    for cell in report.cells:
        grid[tr_values.index(cell.t_reverse), tf_values.index(cell.t_forward)] = cell.mean_wd
    fig, ax = plt.subplots(figsize=(4.6, 3.8))
    im = ax.imshow(grid, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(tf_values)))
    ax.set_xticklabels(tf_values)
    ax.set_yticks(range(len(tr_values)))
    ax.set_yticklabels(tr_values)
    ax.set_xlabel("inversion steps")
    ax.set_ylabel("sampling steps")
    best = report.best
    ax.plot(
        tf_values.index(best.t_forward), tr_values.index(best.t_reverse), "r*", markersize=14
    )
    fig.colorbar(im, ax=ax, label="mean inter-site WD")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_training_curves(log_path: str | Path, out_path: str | Path) -> None:
    """Loss curves from a JSONL training log."""
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line]
    if not records:
        return
    keys = [k for k in ("loss", "noise", "gradient", "ema", "val_noise") if k in records[0]]
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    epochs = [r["epoch"] for r in records]
    for key in keys:
        ax.plot(epochs, [r.get(key, np.nan) for r in records], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def write_summary_table(path: str | Path, sections: dict[str, dict[str, float]]) -> None:
    """Human-readable aligned summary table."""
    lines = []
    for title, values in sections.items():
        lines.append(title)
        width = max((len(k) for k in values), default=0)
        for key, val in values.items():
            lines.append(f"  {key.ljust(width)}  {_fmt(val)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
