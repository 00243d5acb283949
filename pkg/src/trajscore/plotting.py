"""Matplotlib figures for reports (file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_NAMES  # noqa: E402


def plot_roadmap(rows, path):
    labels = [f"{r['method']}\n{r['inference_vocab']}" for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(rows)), 4))
    w = 0.27
    ax.bar(x - w, [r["epdms1"] for r in rows], w, label="stage 1")
    ax.bar(x, [r["epdms2"] for r in rows], w, label="stage 2")
    ax.bar(x + w, [r["epdms"] for r in rows], w, label="final")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7, rotation=30, ha="right")
    ax.set_ylabel("EPDMS")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_subscores(reports, path, stage: int = 2):
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(len(METRIC_NAMES))
    w = 0.8 / max(1, len(reports))
    for i, rep in enumerate(reports):
        sub = rep["subscore_means"][f"stage{stage}"]
        ax.bar(x + (i - (len(reports) - 1) / 2) * w, [100 * sub[m] for m in METRIC_NAMES], w, label=rep["name"])
    ax.set_xticks(x)
    ax.set_xticklabels([m.upper() for m in METRIC_NAMES])
    ax.set_ylabel(f"stage-{stage} mean (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
