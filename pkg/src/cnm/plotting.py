"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_heatmap(mean: np.ndarray, path, title: str = "mean |f| [m]", std: Optional[np.ndarray] = None) -> None:
    """Rows: evaluation frame m, columns: checkpoint n. The memory triangle is n >= m."""
    panels = [(mean, title)] + ([(std, "std |f| [m]")] if std is not None else [])
    fig, axes = plt.subplots(1, len(panels), figsize=(4.6 * len(panels), 4), squeeze=False)
    for ax, (mat, label) in zip(axes[0], panels):
        im = ax.imshow(mat, cmap="viridis", origin="upper")
        ax.set_xlabel("checkpoint n")
        ax.set_ylabel("frame m")
        ax.set_title(label)
        T = mat.shape[0]
        # outline the memory triangle
        ax.plot([-0.5, T - 0.5], [-0.5, T - 0.5], color="w", lw=0.8)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_forgetting(curves: Dict[str, Sequence[float]], path, threshold: float = 0.01) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, values in curves.items():
        ax.plot(np.arange(len(values)), values, marker="o", ms=3, label=name)
    ax.set_xlabel("time step t")
    ax.set_ylabel(f"frame-0 fraction |f| < {threshold:g}")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(rows: Sequence[dict], path) -> None:
    """Per-epoch loss terms on a log scale, one vertical tick per frame boundary."""
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = np.arange(len(rows))
    for key in ("total", "data", "normal", "eikonal", "off"):
        if key in rows[0]:
            y = np.array([float(r[key]) for r in rows])
            ax.semilogy(x, np.maximum(y, 1e-12), lw=0.8, label=key)
    frames = np.array([int(r["frame"]) for r in rows])
    for b in np.flatnonzero(np.diff(frames)) + 1:
        ax.axvline(b, color="k", alpha=0.15, lw=0.6)
    ax.set_xlabel("epoch (cumulative)")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_slice(raster: np.ndarray, extent, path, limit: float, axis: str = "z") -> None:
    """Diverging map with the zero level drawn as a contour."""
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(raster, origin="lower", extent=extent, cmap="RdBu", vmin=-limit, vmax=limit)
    if raster.min() < 0 < raster.max():
        ax.contour(raster, levels=[0.0], colors="k", linewidths=0.8, origin="lower", extent=extent)
    labels = {"x": ("y", "z"), "y": ("x", "z"), "z": ("x", "y")}[axis]
    ax.set_xlabel(labels[0] + " [m]")
    ax.set_ylabel(labels[1] + " [m]")
    fig.colorbar(im, ax=ax, label="f [m]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
