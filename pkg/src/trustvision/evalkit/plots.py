"""Static SVG figures for evaluation reports.

Figures are written with a fixed hash salt and no date metadata so the
same inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "trustvision",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.4),
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def accuracy_histogram(accuracies, path, bins: int = 10):
    """Histogram of per-class test accuracy."""
    acc = np.asarray([a for a in accuracies if a is not None], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(acc * 100.0, bins=np.linspace(0, 100, bins + 1), color="#4c72b0", edgecolor="white")
        ax.set_xlabel("Per-class test accuracy (%)")
        ax.set_ylabel("Number of classes")
        return _save(fig, path)


def accuracy_vs_train_count(points, path):
    """Scatter of (training images, accuracy) per class."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if points:
            x, y = zip(*points)
            ax.scatter(x, np.asarray(y) * 100.0, s=12, alpha=0.7, color="#55a868")
            if min(x) > 0 and max(x) / max(min(x), 1) > 50:
                ax.set_xscale("log")
        ax.set_xlabel("Training images")
        ax.set_ylabel("Test accuracy (%)")
        return _save(fig, path)


def class_counts(names, counts, path):
    """Bar chart of images per class, largest first."""
    order = np.argsort(-np.asarray(counts), kind="stable")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(5.0, 0.18 * len(names)), 3.4))
        ax.bar(range(len(order)), np.asarray(counts)[order], color="#8172b2")
        ax.set_xticks(range(len(order)))
        ax.set_xticklabels([names[i] for i in order], rotation=90, fontsize=6)
        ax.set_ylabel("Images")
        return _save(fig, path)


def energy_boxplot(id_energies, ood_energies, tau: float, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.boxplot([np.asarray(id_energies), np.asarray(ood_energies)])
        ax.set_xticks([1, 2])
        ax.set_xticklabels(["ID", "OOD"])
        ax.axhline(tau, color="red", lw=1)
        ax.set_ylabel("Energy")
        return _save(fig, path)


def roc_curve(fpr, tpr, path, level: float = 0.95):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(fpr, tpr, color="#c44e52")
        ax.plot([0, 1], [0, 1], ls=":", color="grey")
        ax.axhline(level, ls="--", lw=0.8, color="grey")
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        return _save(fig, path)


def loss_trace(losses, path, window: int = 20):
    losses = np.asarray(losses, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(losses, lw=0.6, alpha=0.5, color="#4c72b0")
        if losses.size >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window - 1, losses.size), smooth, color="#4c72b0")
        ax.set_xlabel("Step")
        ax.set_ylabel("Masked reconstruction loss")
        return _save(fig, path)
