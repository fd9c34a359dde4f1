"""PNG sample grids and SVG figures (histogram, quiver)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_SVG_META = {"Date": None}


def to_uint8(images: torch.Tensor) -> np.ndarray:
    x = images.detach().double().clamp(-1.0, 1.0).numpy()
    return np.round((x + 1.0) * 127.5).astype(np.uint8)


def image_grid(images: torch.Tensor, nrow: int = 8, pad: int = 2) -> np.ndarray:
    """Tile (B, 1, H, W) images in [-1, 1] into one 8-bit grayscale array."""
    pix = to_uint8(images)[:, 0]
    b, h, w = pix.shape
    ncol = min(nrow, max(b, 1))
    rows = max(1, -(-b // ncol))
    grid = np.zeros((rows * (h + pad) + pad, ncol * (w + pad) + pad), dtype=np.uint8)
    for i in range(b):
        r, c = divmod(i, ncol)
        top, left = pad + r * (h + pad), pad + c * (w + pad)
        grid[top:top + h, left:left + w] = pix[i]
    return grid


def save_grid(images: torch.Tensor, path, nrow: int = 8) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_grid(images, nrow), mode="L").save(path)
    return path


def save_scatter(points: torch.Tensor, path, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    p = points.detach().double().numpy()
    ax.scatter(p[:, 0], p[:, 1], s=2, alpha=0.5)
    ax.set_title(title)
    ax.set_aspect("equal")
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def save_samples(samples: torch.Tensor, path, nrow: int = 8) -> Path:
    """Image batches become a grid; 2D point clouds become a scatter plot."""
    if samples.ndim == 4:
        return save_grid(samples[:64], path, nrow)
    return save_scatter(samples, path)


def save_interpolation(frames: torch.Tensor, path) -> Path:
    if frames.ndim == 4:
        return save_grid(frames, path, nrow=frames.shape[0])
    return save_scatter(frames, path, "interpolation")


def histogram_svg(stats_list, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    for stats in stats_list:
        edges, counts = stats.histogram
        ax.stairs(counts, edges, fill=True, alpha=0.5,
                  label=f"{stats.sampler_id} (mean {stats.mean:.3f})")
    ax.set_xlabel("straightness ratio")
    ax.set_ylabel("trajectories")
    ax.legend()
    plt.rcParams["svg.hashsalt"] = "rectiflow"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def quiver_svg(proj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.quiver(proj.grid[..., 0], proj.grid[..., 1], proj.arrows[..., 0], proj.arrows[..., 1])
    ax.plot([0.0], [0.0], "o", color="red", label="noise")
    ax.plot([proj.end_coords[0]], [0.0], "o", color="green", label="target")
    ax.set_aspect("equal")
    ax.legend(loc="upper left")
    plt.rcParams["svg.hashsalt"] = "rectiflow"
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path
