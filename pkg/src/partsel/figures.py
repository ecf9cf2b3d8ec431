"""Matplotlib rendering of run artifacts (Agg only, written to files).

Figures are a convenience layer over the delimited outputs: every figure is
derived from data that is also exported as CSV/PRST, never the only record.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle


def training_curves(rows, path):
    """MAE and loss-component curves from metrics history rows."""
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(epochs, [r["train_mae"] for r in rows], label="train MAE")
    axes[0].plot(epochs, [r["eval_mae"] for r in rows], label="eval MAE")
    hits = [r["hit_rate"] for r in rows]
    if all(h is not None for h in hits):
        ax2 = axes[0].twinx()
        ax2.plot(epochs, hits, color="tab:green", alpha=0.5, label="hit rate")
        ax2.set_ylabel("hit rate")
        ax2.set_ylim(0, 1)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("MAE (months)")
    axes[0].legend(loc="upper right")
    axes[1].plot(epochs, [r["loss_total"] for r in rows], label="total")
    axes[1].plot(epochs, [r["loss_rank"] for r in rows], label="rank")
    axes[1].plot(epochs, [r["loss_reg"] for r in rows], label="regression")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("loss")
    axes[1].legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pred_scatter(per_sample, mae, path):
    """Ground truth vs predicted age for the eval split."""
    y_true = [r["y_true"] for r in per_sample]
    y_pred = [r["y_pred"] for r in per_sample]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(y_true, y_pred, s=8, alpha=0.5)
    lo = min(min(y_true), min(y_pred))
    hi = max(max(y_true), max(y_pred))
    ax.plot([lo, hi], [lo, hi], color="k", lw=1, ls="--")
    ax.set_xlabel("true age (months)")
    ax.set_ylabel("predicted age (months)")
    ax.set_title(f"MAE = {mae:.2f} months")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _draw_box(ax, box, color, label=None):
    ax.add_patch(
        Rectangle(
            (box.x1, box.y1),
            box.x2 - box.x1,
            box.y2 - box.y1,
            fill=False,
            edgecolor=color,
            lw=1.5,
            label=label,
        )
    )


def maps_overview(image, maps, parts, planted_box, path):
    """Image with selected parts, plus the per-level relation maps.

    image: (1,H,W) array; maps: list of (H,W) arrays already upsampled to the
    image size; parts: selected ScoredParts; planted_box: Box or None.
    """
    n = 1 + len(maps)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.4))
    if n == 1:
        axes = [axes]
    axes[0].imshow(image[0], cmap="gray", vmin=0, vmax=1)
    for i, part in enumerate(parts):
        _draw_box(axes[0], part.box, "tab:orange", label="selected" if i == 0 else None)
    if planted_box is not None:
        _draw_box(axes[0], planted_box, "tab:green", label="planted")
    axes[0].set_title("input + parts")
    if parts or planted_box is not None:
        axes[0].legend(loc="lower right", fontsize=7)
    for level, m in enumerate(maps):
        ax = axes[1 + level]
        im = ax.imshow(m, cmap="viridis", vmin=0, vmax=1)
        ax.set_title(f"relation gate L{level}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
