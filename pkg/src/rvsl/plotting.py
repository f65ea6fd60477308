"""Matplotlib renderings of evaluation and training artifacts.

All figures are written straight to files (Agg backend, no display).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def cmc_figure(report, path):
    """Plot the cumulative match curve from an evaluation report."""
    curve = report["cmc_curve"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(curve) + 1), curve, marker="o", markersize=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"CMC (mAP = {report['mAP']:.3f})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def comparison_figure(results, path, metric="mAP", title="configuration sweep"):
    """Bar chart over named runs; ``results`` maps label -> report dict."""
    if not results:
        raise ValueError("no results to plot")
    labels = list(results)
    values = [results[k][metric] for k in labels]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.5))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_figure(log_path, path):
    """Per-stage total-loss curves from a JSONL training log."""
    by_stage = {}
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            by_stage.setdefault(rec["stage"], []).append(rec["losses"]["total"])
    if not by_stage:
        raise ValueError(f"empty training log {log_path}")
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for stage, vals in sorted(by_stage.items()):
        ax.plot(np.arange(1, len(vals) + 1), vals, label=stage)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
