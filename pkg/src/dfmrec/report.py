"""Figure rendering for the report paths: NDCG curves, timing bars, grids.

All functions write an image file and return the path; the Agg backend is
forced so rendering works headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_ndcg_figure", "save_bench_figure", "save_grid_figure"]


def save_ndcg_figure(curves: dict, path: str, title: str = "Ranking quality"):
    """Line chart of NDCG@K versus K, one line per labelled model."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for label, values in curves.items():
        ks = np.arange(1, len(values) + 1)
        ax.plot(ks, values, marker="o", markersize=3.5, label=str(label))
    ax.set_xlabel("K")
    ax.set_ylabel("NDCG@K")
    ax.set_title(title)
    ax.set_ylim(0.0, 1.02)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_bench_figure(reports, path: str):
    """Grouped TTC bars per code length with the acceleration ratio overlaid."""
    reports = sorted(reports, key=lambda r: r.code_length)
    ks = [str(r.code_length) for r in reports]
    x = np.arange(len(reports))
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.bar(x - 0.18, [r.ttc_float for r in reports], width=0.36, label="float")
    ax.bar(x + 0.18, [r.ttc_binary for r in reports], width=0.36, label="binary")
    ax.set_xticks(x, ks)
    ax.set_xlabel("code length")
    ax.set_ylabel("TTC (s)")
    ax.set_title("Testing time cost")
    ax2 = ax.twinx()
    ax2.plot(
        x,
        [r.acceleration_ratio for r in reports],
        color="black",
        marker="d",
        linestyle="--",
        label="ratio",
    )
    ax2.set_ylabel("acceleration ratio")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_grid_figure(rows, path: str, k_eval_pos: int = 10):
    """NDCG@k_eval versus beta (log x), one line per code length."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    by_k = {}
    for row in rows:
        if row.status == "ok":
            by_k.setdefault(row.k, []).append((row.beta, row.ndcg[k_eval_pos - 1]))
    for k, pts in sorted(by_k.items()):
        pts.sort()
        betas = [max(b, 1e-12) for b, _ in pts]  # keep beta=0 plottable on log x
        ax.plot(betas, [v for _, v in pts], marker="o", markersize=3.5, label=f"k={k}")
    ax.set_xscale("log")
    ax.set_xlabel("de-correlation strength")
    ax.set_ylabel(f"NDCG@{k_eval_pos}")
    ax.set_title("Hyperparameter sweep")
    ax.grid(alpha=0.3)
    if by_k:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
