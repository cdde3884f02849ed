"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import KINDS, MseReport  # noqa: E402

KIND_STYLE = {
    "frame": dict(color="tab:blue", marker="o", label="frames"),
    "yt_slice": dict(color="goldenrod", marker="s", label="y-t slices"),
    "permuted": dict(color="tab:green", marker="^", label="permuted frames"),
}


def box_off(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)


def savefig(fig, filename, **kwargs):
    args = {"dpi": 150, "bbox_inches": "tight"}
    args.update(kwargs)
    fig.savefig(filename, **args)
    plt.close(fig)


def plot_mse_report(report: MseReport, path: str | Path, title: str | None = None) -> Path:
    """Noise-prediction MSE against noise level, one line per input kind.
    Noise increases to the right (1 - alpha_bar)."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for kind in KINDS:
        ab, mse = report.series(kind)
        if ab.size == 0:
            continue
        order = np.argsort(1.0 - ab)
        ax.plot((1.0 - ab)[order], mse[order], lw=1.5, ms=4, **KIND_STYLE[kind])
    ax.set_xlabel(r"noise level $1-\bar\alpha$")
    ax.set_ylabel("noise-prediction MSE")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    box_off(ax)
    ax.legend(frameon=False)
    path = Path(path)
    savefig(fig, path)
    return path


def plot_flow_errors(per_pair: list[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    ax.bar(np.arange(len(per_pair)), per_pair, color="tab:gray")
    ax.set_xlabel("frame pair")
    ax.set_ylabel("flow error (px)")
    box_off(ax)
    path = Path(path)
    savefig(fig, path)
    return path


def plot_slices(source: np.ndarray, edited: np.ndarray, path: str | Path, column: int | None = None) -> Path:
    """Middle frame and a y-t slice of the source and edited videos."""
    column = source.shape[2] // 2 if column is None else column
    mid = source.shape[0] // 2

    def show(ax, img, title):
        img = np.clip((np.asarray(img, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
        ax.imshow(img if img.shape[-1] == 3 else img[..., 0], cmap=None if img.shape[-1] == 3 else "gray")
        ax.set_title(title, fontsize=8)
        ax.axis("off")

    fig, axes = plt.subplots(2, 2, figsize=(6.0, 5.0))
    show(axes[0, 0], source[mid], "source frame")
    show(axes[0, 1], edited[mid], "edited frame")
    show(axes[1, 0], source[:, :, column].transpose(1, 0, 2), "source y-t slice")
    show(axes[1, 1], edited[:, :, column].transpose(1, 0, 2), "edited y-t slice")
    path = Path(path)
    savefig(fig, path)
    return path
