"""Report figures, written next to the CSV tables they summarize."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history: list[dict], path) -> Path:
    """Training loss per epoch, with validation F1 on a twin axis when recorded."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["loss"] for h in history], color="tab:blue", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    val = [(h["epoch"], h["val_f1"]) for h in history if h["val_f1"] is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:orange", label="val F1")
        ax2.set_ylabel("validation F1")
        ax2.set_ylim(0, 1)
    ax.set_title("training history")
    fig.tight_layout()
    return _save(fig, path)


def plot_f1_distribution(f1_values, path, label: str = "model") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(np.asarray(f1_values), bins=np.linspace(0, 1, 11), color="tab:green", edgecolor="black")
    ax.set_xlabel("per-sample F1")
    ax.set_ylabel("samples")
    ax.set_title(f"F1 distribution ({label})")
    fig.tight_layout()
    return _save(fig, path)


def plot_cc_histogram(cc, path) -> Path:
    """Closeness of predicted vs. true sources (a CCSummary)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    centers = (cc.bins[:-1] + cc.bins[1:]) / 2
    width = (cc.bins[1] - cc.bins[0]) * 0.4
    ax.bar(centers - width / 2, cc.pred_hist, width, label=f"predicted (mean {cc.pred_mean:.3f})")
    ax.bar(centers + width / 2, cc.true_hist, width, label=f"true (mean {cc.true_mean:.3f})")
    ax.set_xlabel("closeness centrality in infected subgraph")
    ax.set_ylabel("sources")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    """Grouped bars of F1 / recall / precision for each ablation variant."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    metrics = ("f1", "recall", "precision")
    x = np.arange(len(rows))
    width = 0.25
    for j, m in enumerate(metrics):
        ax.bar(x + (j - 1) * width, [r[m] for r in rows], width, label=m)
    ax.set_xticks(x, [r["variant"] for r in rows])
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
