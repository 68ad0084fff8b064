"""Static figures: loss curves, PR curves, value histograms and saliency overlays."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curves(history, path):
    ep = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("recon", "kl", "constraint", "total"):
        ax.plot(ep, [r[key] for r in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def pr_curve(curve, path, label=None):
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.step(np.r_[0.0, curve.recall], np.r_[curve.precision[0], curve.precision], where="pre", label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if label:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def value_histograms(edges, normal_counts, anomalous_counts, path, title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    centers = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    n = normal_counts / max(normal_counts.sum(), 1)
    a = anomalous_counts / max(anomalous_counts.sum(), 1)
    ax.bar(centers, n, width, alpha=0.5, label="normal")
    ax.bar(centers, a, width, alpha=0.5, label="anomalous")
    ax.set_xlabel("saliency")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def overlays(images, saliencies, masks, path, n=4):
    n = min(n, len(images))
    fig, axes = plt.subplots(3, n, figsize=(2 * n, 6), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(images[i], cmap="gray", vmin=0, vmax=1)
        axes[1, i].imshow(saliencies[i], cmap="jet")
        axes[2, i].imshow(masks[i], cmap="gray")
        for r in range(3):
            axes[r, i].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
