"""Figure rendering for eval reports and training traces (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_rd_curves(curves, metric: str, path: str | Path) -> None:
    """One rate-distortion figure per metric; curves drawn with markers."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for curve in curves:
        try:
            ax.plot(curve.bpps, curve.metric(metric), marker="o", label=curve.label)
        except KeyError:
            continue
    ax.set_xlabel("bpp")
    ax.set_ylabel(metric)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_trace(rows, path: str | Path) -> None:
    """Loss-term trajectories from a list of LossReport rows."""
    if not rows:
        return
    steps = [r.step for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r.total for r in rows], label="total")
    ax.plot(steps, [r.distortion for r in rows], label="distortion")
    if any(r.rate_bpp for r in rows):
        ax2 = ax.twinx()
        ax2.plot(steps, [r.rate_bpp for r in rows], color="tab:green", alpha=0.6, label="rate (bpp)")
        ax2.set_ylabel("bpp")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
