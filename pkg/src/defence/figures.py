"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

_TERMS = ("adv", "l1", "perc", "style", "ssim")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_log(csv_path, png_path) -> Path:
    """Generator total, discriminator loss and the individual terms per step."""
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    step = np.array([int(r["step"]) for r in rows])
    col = {k: np.array([float(r[k]) for r in rows]) for k in (*_TERMS, "total", "d_loss")}
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.2))
        ax0.plot(step, col["total"], label="generator total", lw=1)
        ax0.plot(step, col["d_loss"], label="discriminator", lw=1)
        ax0.set_xlabel("step")
        ax0.set_ylabel("loss")
        ax0.legend(frameon=False)
        for k in _TERMS:
            if np.any(col[k]):
                ax1.plot(step, col[k], label=k, lw=1)
        ax1.set_xlabel("step")
        ax1.set_yscale("log")
        ax1.legend(frameon=False, ncol=2)
        fig.tight_layout()
        return _save(fig, png_path)


def plot_eval_report(report: dict, png_path) -> Path:
    """Per-image SSIM / PSNR / L1 bars with the corpus mean marked."""
    names = [r["name"] for r in report["images"]]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.0 + 0.05 * len(names)))
        for ax, key, label in zip(axes, ("ssim", "psnr", "l1"), ("SSIM", "PSNR [dB]", "L1")):
            vals = [r[key] for r in report["images"]]
            ax.barh(range(len(vals)), vals, color="0.55")
            if report["mean"].get(key) is not None:
                ax.axvline(report["mean"][key], color="C3", lw=1)
            ax.set_yticks(range(len(vals)))
            ax.set_yticklabels(names if ax is axes[0] else [])
            ax.invert_yaxis()
            ax.set_xlabel(label)
        fig.tight_layout()
        return _save(fig, png_path)


def save_panel(images: dict, png_path) -> Path:
    """Side-by-side view of named HxWxC (or HxW) images."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(2.4 * len(images), 2.6))
        axes = np.atleast_1d(axes)
        for ax, (title, img) in zip(axes, images.items()):
            arr = np.asarray(img)
            if arr.ndim == 3 and arr.shape[2] == 1:
                arr = arr[..., 0]
            ax.imshow(np.clip(arr, 0, 1), cmap="gray" if arr.ndim == 2 else None, vmin=0, vmax=1)
            ax.set_title(title)
            ax.axis("off")
        fig.tight_layout()
        return _save(fig, png_path)
