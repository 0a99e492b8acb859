"""Report figures.  Every function writes one PNG and returns its path."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

COMBINATION_COLORS = {"initial": "0.55", "sum": "tab:blue", "multiply": "tab:red"}


def figsize(width: float = 6.0, ratio: float | None = None) -> tuple[float, float]:
    if ratio is None:
        ratio = (np.sqrt(5.0) - 1.0) / 2.0
    return width, width * ratio


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_noise_table(summary: Sequence[dict], path: str | Path) -> Path:
    """Accuracy and valence rate against beta, one line per combination mode.

    ``summary`` rows carry beta, combination, accuracy and valence_rate.
    """
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=figsize(8.0, 0.4))
        modes = sorted({r["combination"] for r in summary}, key=list(COMBINATION_COLORS).index)
        for ax, metric in zip(axes, ("accuracy", "valence_rate")):
            for mode in modes:
                rows = sorted((r for r in summary if r["combination"] == mode), key=lambda r: r["beta"])
                ax.plot([r["beta"] for r in rows], [r[metric] for r in rows], "o-",
                        color=COMBINATION_COLORS.get(mode), label=mode)
            ax.set_xscale("log")
            ax.set_xlabel("noise scale beta")
            ax.set_ylabel(metric.replace("_", " "))
            ax.set_ylim(-0.02, 1.02)
        axes[0].legend(frameon=False)
        return _save(fig, path)


def plot_training_curves(history: Sequence[dict], path: str | Path) -> Path:
    """Loss and accuracy per epoch for the train (and validation) split."""
    with plt.rc_context(RC):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=figsize(8.0, 0.4))
        epochs = [h["epoch"] for h in history]
        for split, style in (("train", "-"), ("validation", "--")):
            if not history or split not in history[0]:
                continue
            ax_loss.plot(epochs, [h[split]["loss"] for h in history], style, color="k", label=split)
            ax_acc.plot(epochs, [h[split]["accuracy"] for h in history], style, color="tab:blue",
                        label=f"{split} accuracy")
            ax_acc.plot(epochs, [h[split]["valence_rate"] for h in history], style, color="tab:red",
                        label=f"{split} valence")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylim(-0.02, 1.02)
        ax_loss.legend(frameon=False)
        ax_acc.legend(frameon=False)
        return _save(fig, path)


def plot_ablations(rows: Sequence[dict], path: str | Path) -> Path:
    """Mean test accuracy and valence rate per variant, with the spread over seeds."""
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(6.0, 0.5))
        x = np.arange(len(variants))
        for k, (metric, color) in enumerate((("accuracy", "tab:blue"), ("valence_rate", "tab:red"))):
            vals = [[r[metric] for r in rows if r["variant"] == v] for v in variants]
            ax.bar(x + (k - 0.5) * 0.38, [np.mean(v) for v in vals], 0.36,
                   yerr=[np.std(v) for v in vals], color=color, label=metric.replace("_", " "))
        ax.set_xticks(x)
        ax.set_xticklabels(variants)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
        return _save(fig, path)
