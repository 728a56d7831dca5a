"""Figure rendering for the report paths: loss curves, degradation curves,
ablation bars, and frame strips. All figures go straight to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(history: list[tuple[int, float]], path, title: str = "training loss"):
    iters = [i for i, _ in history]
    losses = [l for _, l in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(iters, losses, lw=0.8)
    if min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_degradation_plot(curves: dict[str, list[float]], path,
                          title: str = "quality over stream position"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, curve in curves.items():
        ax.plot(range(len(curve)), curve, marker="o", ms=3, label=label)
    ax.set_xlabel("chunk index")
    ax.set_ylabel("frame-marginal MMD")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_bars(results: dict[str, float], path, title: str = "ablation grid"):
    labels = list(results.keys())
    values = [results[k] for k in labels]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean frame-marginal MMD")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_frame_strip(video: np.ndarray, path, max_frames: int = 20):
    """One video (N, H, W, C) as a horizontal strip of grayscale frames."""
    n = min(video.shape[0], max_frames)
    fig, axes = plt.subplots(1, n, figsize=(n * 0.8, 1.0))
    if n == 1:
        axes = [axes]
    for i, ax in enumerate(axes):
        ax.imshow(video[i, :, :, 0], cmap="gray", vmin=-1, vmax=1)
        ax.set_axis_off()
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=120)
    plt.close(fig)
