"""Figures for run reports.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_trajectory(path, est: np.ndarray, gt: np.ndarray | None = None) -> None:
    """Top-down (x, z) view of estimated and ground-truth camera centers."""
    est = np.asarray(est)
    fig, ax = plt.subplots(figsize=(5, 4))
    if gt is not None and len(gt):
        gt = np.asarray(gt)
        ax.plot(gt[:, 0], gt[:, 2], "k--", lw=1, label="ground truth")
    ax.plot(est[:, 0], est[:, 2], "-o", ms=2, lw=1, label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_metrics(path, rows: list[dict], keys=("psnr", "masked_psnr", "iou")) -> None:
    """One panel per metric against frame index; NaN entries are skipped."""
    keys = [k for k in keys if any(math.isfinite(r.get(k, math.nan)) for r in rows)]
    if not keys:
        keys = ["psnr"]
    fig, axes = plt.subplots(len(keys), 1, figsize=(6, 2.2 * len(keys)), sharex=True, squeeze=False)
    idx = np.array([r["index"] for r in rows])
    kf = np.array([bool(r.get("keyframe", False)) for r in rows])
    for ax, k in zip(axes[:, 0], keys):
        y = np.array([r.get(k, math.nan) for r in rows], dtype=float)
        ax.plot(idx, y, "-", lw=1)
        ax.plot(idx[kf], y[kf], "o", ms=3, label="keyframe")
        ax.set_ylabel(k)
        ax.grid(alpha=0.3)
    axes[0, 0].legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_masks(path, panels: list[tuple[str, np.ndarray, np.ndarray, np.ndarray | None]]) -> None:
    """Rows of (title, rgb, estimated mask, gt mask or None)."""
    if not panels:
        return
    fig, axes = plt.subplots(len(panels), 3, figsize=(9, 2.6 * len(panels)), squeeze=False)
    for row, (title, rgb, est, gt) in zip(axes, panels):
        row[0].imshow(np.clip(rgb, 0, 1))
        row[0].set_title(title, fontsize=8)
        row[1].imshow(est, cmap="gray", vmin=0, vmax=1)
        row[1].set_title("estimated mask", fontsize=8)
        if gt is not None:
            row[2].imshow(gt, cmap="gray", vmin=0, vmax=1)
            row[2].set_title("ground truth", fontsize=8)
        for ax in row:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=90)
    plt.close(fig)
