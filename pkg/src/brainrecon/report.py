"""Rendering of evaluation artifacts: reconstruction montages and metric
summary figures (matplotlib, Agg) alongside the CSV/JSON tables."""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

METRIC_KEYS = ("mse_top1", "mse_topk", "ssim_top1", "ssim_topk",
               "pcc_top1", "pcc_topk")


def write_metrics_csv(report: dict, path: str, ids: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id"] + list(METRIC_KEYS))
        for sid, row in zip(ids, report["per_stimulus"]):
            w.writerow([sid] + ["%.6g" % row[k] for k in METRIC_KEYS])
        w.writerow(["mean"] + ["%.6g" % report["aggregate"][k]
                               for k in METRIC_KEYS])


def montage_figure(stimuli: list[np.ndarray], recon_sets: list[list[np.ndarray]],
                   path: str, max_rows: int = 10, max_recons: int = 10) -> None:
    """One row per stimulus: true image first, then ranked reconstructions."""
    rows = min(len(stimuli), max_rows)
    cols = 1 + min(max(len(r) for r in recon_sets[:rows]), max_recons)
    fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.2 * rows),
                             squeeze=False)
    for i in range(rows):
        axes[i][0].imshow(stimuli[i], cmap="gray", vmin=0, vmax=1)
        axes[i][0].set_ylabel("#%d" % i, fontsize=7)
        for j in range(1, cols):
            if j - 1 < len(recon_sets[i]):
                axes[i][j].imshow(recon_sets[i][j - 1], cmap="gray",
                                  vmin=0, vmax=1)
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_title("stimulus", fontsize=7)
    for j in range(1, cols):
        axes[0][j].set_title("rank %d" % j, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metrics_figure(report: dict, path: str) -> None:
    """Bar chart of aggregate metrics plus per-layer perceptual correlations."""
    agg = report["aggregate"]
    has_layers = "layer_corrs" in agg
    fig, axes = plt.subplots(1, 2 if has_layers else 1,
                             figsize=(9 if has_layers else 5, 3.2),
                             squeeze=False)
    ax = axes[0][0]
    keys = [k for k in METRIC_KEYS if k in agg]
    ax.bar(range(len(keys)), [agg[k] for k in keys], color="steelblue")
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(keys, rotation=45, ha="right", fontsize=7)
    ax.set_title("aggregate image metrics", fontsize=9)
    if has_layers:
        ax2 = axes[0][1]
        lc = agg["layer_corrs"]
        ax2.plot(range(1, len(lc) + 1), lc, "o-")
        ax2.set_xlabel("encoder conv stage")
        ax2.set_ylabel("feature correlation")
        ax2.set_title("perceptual similarity by layer", fontsize=9)
        ax2.set_ylim(-1, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def comparison_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target_id", "generator_score", "library_score",
                    "generator_better"])
        for r in rows:
            w.writerow([r["target_id"], "%.10g" % r["generator_score"],
                        "%.10g" % r["library_score"],
                        int(r["generator_better"])])


def comparison_figure(rows: list[dict], path: str) -> None:
    """Paired Top-1 score comparison: infinite generator vs finite library."""
    g = [r["generator_score"] for r in rows]
    l = [r["library_score"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    lim = max(max(g), max(l)) * 1.05
    ax.scatter(l, g, s=18, color="firebrick")
    ax.plot([0, lim], [0, lim], "k--", lw=0.8)
    ax.set_xlabel("finite-library Top-1 score")
    ax.set_ylabel("generator Top-1 score")
    ax.set_title("below diagonal: generator wins", fontsize=9)
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
