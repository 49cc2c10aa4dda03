"""Static figures written next to the CSV outputs of ``gmcml eval``."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .render import PALETTE  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _color(k: int):
    rgb = np.asarray(PALETTE[k % len(PALETTE)], dtype=float)
    # pure white would vanish on the canvas
    return tuple(rgb * 0.8) if rgb.min() > 0.9 else tuple(rgb)


def projection_figure(path, xy: np.ndarray, categories: Sequence[int], title: str = "descriptor PCA") -> Path:
    cats = np.asarray(categories, dtype=int)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        for k in np.unique(cats):
            sel = cats == k
            ax.scatter(xy[sel, 0], xy[sel, 1], s=8, color=_color(k), edgecolors="k", linewidths=0.2, label=f"class {k}")
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.set_title(title)
        ax.legend(loc="best", markerscale=1.5, frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if len(y) < window or window < 2:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def training_figure(path, rows: list[dict], window: int = 25) -> Path:
    """Loss components and noise ratios against step from a metrics file."""
    step = np.array([int(r["step"]) for r in rows])

    def col(name):
        return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])

    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for name in ("loss_gen", "loss_enc"):
            y = _smooth(col(name), window)
            axes[0].plot(step[len(step) - len(y):], y, label=name)
        axes[0].set_yscale("log")
        axes[0].set_title("reconstruction")
        for name in ("loss_pair", "loss_tri", "loss_softmax"):
            y = col(name)
            ok = ~np.isnan(y)
            if ok.any():
                ys = _smooth(y[ok], window)
                axes[1].plot(step[ok][len(y[ok]) - len(ys):], ys, label=name)
        axes[1].set_title("metric and class losses")
        for name in ("r_rec", "r_cls"):
            axes[2].plot(step, col(name), label=name, lw=0.8)
        axes[2].set_ylim(-0.02, 1.0)
        axes[2].set_title("noise ratios")
        for ax in axes:
            ax.set_xlabel("step")
            ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def confusion_figure(path, confusion: np.ndarray) -> Path:
    cm = np.asarray(confusion)
    k = cm.shape[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.5 * k + 2, 0.5 * k + 1.6))
        ax.imshow(cm, cmap="Blues")
        for i in range(k):
            for j in range(k):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if cm[i, j] > cm.max() / 2 else "black")
        ax.set_xticks(range(k))
        ax.set_yticks(range(k))
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
