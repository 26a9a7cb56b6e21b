"""Figures for evaluation reports, rendered to SVG with matplotlib."""
from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.fonttype": "none",
    "svg.hashsalt": "tfcrnn",
}


def _save(fig, path: str | os.PathLike) -> None:
    # Fixed metadata keeps repeated renders byte-identical.
    fig.savefig(path, format="svg", bbox_inches="tight", metadata={"Date": None, "Creator": "tfcrnn"})
    plt.close(fig)


def per_class_f1(metrics, path) -> None:
    with plt.rc_context(STYLE):
        k = len(metrics.label_names)
        fig, ax = plt.subplots(figsize=(max(4.0, 0.22 * k), 2.6))
        ax.bar(np.arange(k), metrics.f1, color="0.35")
        ax.set_xticks(np.arange(k), metrics.label_names, rotation=90)
        ax.set_ylim(0, 1)
        ax.set_ylabel("F1")
        ax.set_title(f"accuracy {metrics.accuracy:.4f}")
        _save(fig, path)


def f1_delta_bars(label_names: Sequence[str], delta: np.ndarray, path) -> None:
    """Per-keyword F1 differences, sorted from largest gain to largest loss."""
    order = np.argsort(-np.asarray(delta), kind="stable")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.22 * len(order)), 2.6))
        values = np.asarray(delta)[order]
        colors = np.where(values >= 0, "tab:blue", "tab:red")
        ax.bar(np.arange(len(order)), values, color=colors)
        ax.axhline(0, color="k", lw=0.6)
        ax.set_xticks(np.arange(len(order)), [label_names[i] for i in order], rotation=90)
        ax.set_ylabel("F1 difference (a - b)")
        _save(fig, path)


def _heatmap(ax, matrix, names, title):
    im = ax.imshow(matrix, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(title)
    for i in range(len(names)):
        for j in range(len(names)):
            v = matrix[i, j]
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=6,
                    color="white" if v > 0.6 else "black")
    return im


def confusion_heatmap(metrics, indices: Sequence[int], path, title: str = "") -> None:
    sub = metrics.confusion[np.ix_(indices, indices)]
    names = [metrics.label_names[i] for i in indices]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        im = _heatmap(ax, sub, names, title)
        fig.colorbar(im, ax=ax, shrink=0.8)
        _save(fig, path)


def confusion_pair(a, b, indices: Sequence[int], path) -> None:
    names = [a.label_names[i] for i in indices]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.4, 3.0))
        for ax, metrics, title in zip(axes, (a, b), ("a", "b")):
            im = _heatmap(ax, metrics.confusion[np.ix_(indices, indices)], names, title)
        fig.colorbar(im, ax=list(axes), shrink=0.8)
        _save(fig, path)


def excitation_curves(summary, path) -> None:
    """Energy envelope plus one panel per block, one line per class.

    Block panels share a y-range so attenuation across depth is visible.
    """
    classes = list(summary.classes.values())
    n_blocks = classes[0].blocks.shape[0]
    panels = n_blocks + 1
    cols = min(3, panels)
    rows = -(-panels // cols)
    lo = min(float(c.blocks.min()) for c in classes)
    hi = max(float(c.blocks.max()) for c in classes)
    pad = 0.05 * max(hi - lo, 1e-3)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 2.2 * rows), squeeze=False)
        flat = axes.ravel()
        for c in classes:
            steps = np.arange(1, len(c.energy) + 1)
            flat[0].plot(steps, c.energy, label=c.label)
            for b in range(n_blocks):
                flat[b + 1].plot(steps, c.blocks[b], label=c.label)
        flat[0].set_title("RMS energy")
        for b in range(n_blocks):
            flat[b + 1].set_title(f"block {b + 1}")
            flat[b + 1].set_ylim(lo - pad, hi + pad)
        for ax in flat[panels:]:
            ax.set_visible(False)
        for ax in flat[:panels]:
            ax.set_xlabel("time step")
        flat[0].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def training_curves(history, path) -> None:
    epochs = [r.epoch for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(epochs, [r.train_loss for r in history], label="train")
        ax.plot(epochs, [r.val_loss for r in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        _save(fig, path)
