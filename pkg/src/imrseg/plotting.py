"""Figures written next to the CLI's JSON/CSV outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_step_miou(report, path, title=None):
    """Bar chart of held-out mIoU after each refinement step (t = 0 is the initial mask)."""
    steps = list(range(len(report.step_miou)))
    fig, ax = plt.subplots(figsize=(1.2 * len(steps) + 2, 3.2))
    bars = ax.bar(steps, report.step_miou, color=["0.6"] + ["tab:blue"] * (len(steps) - 1))
    for bar, v in zip(bars, report.step_miou):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}", ha="center", fontsize=8)
    ax.set_xticks(steps)
    ax.set_xticklabels([f"t={t}" for t in steps])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mIoU")
    ax.set_title(title or f"fold {report.fold}, {report.mode}, K={report.k}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_trajectory(image, masks, path, gt=None):
    """Image followed by the binary mask at every step."""
    panels = 1 + len(masks) + (gt is not None)
    fig, axes = plt.subplots(1, panels, figsize=(1.8 * panels, 2.0))
    axes = np.atleast_1d(axes)
    axes[0].imshow(image)
    axes[0].set_title("image", fontsize=8)
    for t, m in enumerate(masks):
        axes[t + 1].imshow(np.asarray(m, dtype=float), cmap="gray", vmin=0, vmax=1)
        axes[t + 1].set_title(f"t={t}", fontsize=8)
    if gt is not None:
        axes[-1].imshow(np.asarray(gt, dtype=float), cmap="gray", vmin=0, vmax=1)
        axes[-1].set_title("ground truth", fontsize=8)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
