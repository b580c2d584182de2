"""Matplotlib figures: trajectory overlays and training curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_KEY_COLORS = ("tab:blue", "tab:green", "tab:orange", "tab:purple", "tab:red", "tab:brown")


def trajectory_overlay(polylines: np.ndarray, keyframes, path, max_keyframe_points: int = 2000,
                       dpi: int = 150) -> None:
    """Keyframes as scatter layers with the traced paths drawn over them (2D, scene units)."""
    fig, ax = plt.subplots(figsize=(6, 6))
    rng = np.random.default_rng(0)
    for i, kf in enumerate(keyframes.keyframes):
        pts = kf.pool.points
        if pts.shape[0] > max_keyframe_points:
            pts = pts[rng.choice(pts.shape[0], max_keyframe_points, replace=False)]
        ax.scatter(pts[:, 0], pts[:, 1], s=2, alpha=0.35, color=_KEY_COLORS[i % len(_KEY_COLORS)],
                   label=f"t = {kf.timestamp:g}")
    for line in polylines:
        ax.plot(line[:, 0], line[:, 1], color="k", lw=0.6, alpha=0.7)
        ax.plot(line[-1, 0], line[-1, 1], "o", color="k", ms=1.5)
    ax.set_aspect("equal")
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.legend(loc="upper right", fontsize=7, markerscale=4)
    ax.set_title("trajectories")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def loss_curves(history: list[dict], path, dpi: int = 150) -> None:
    """Normalized fit, weighted regularizer terms and total per iteration (log scale)."""
    its = [r["iter"] for r in history]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True, height_ratios=(3, 1))
    ax.plot(its, [r["total"] for r in history], color="k", lw=1.2, label="total")
    ax.plot(its, [r["fit"] for r in history], lw=1, label="fit (normalized)")
    kinds = sorted({k for r in history for k in r["terms"]})
    for k in kinds:
        ax.plot(its, [max(r["terms"].get(k, np.nan), 1e-16) for r in history], lw=0.8, label=f"L_{k}")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.set_ylabel("loss")
    ax_lr.plot(its, [r["lr"] for r in history], color="tab:gray")
    ax_lr.set_yscale("log")
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
