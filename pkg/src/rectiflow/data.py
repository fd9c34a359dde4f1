"""MNIST IDX ingestion, analytic 2D toy distributions, and seeded batching."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
import torch

from .errors import ConfigError, ConsistencyError, FormatError, LengthMismatchError
from .rng import philox

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
TARGET_SIZE = 32


@dataclass(frozen=True)
class ImageDataset:
    images: torch.Tensor  # (count, 1, H, W) in [-1, 1]
    labels: Optional[list[int]] = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != self.images.shape[0]:
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def tensor(self) -> torch.Tensor:
        return self.images

    def subset(self, n: int) -> "ImageDataset":
        labels = None if self.labels is None else self.labels[:n]
        return ImageDataset(self.images[:n], labels)


@dataclass(frozen=True)
class ToyDataset:
    points: torch.Tensor  # (count, 2)
    generator_name: str
    generator_params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def tensor(self) -> torch.Tensor:
        return self.points


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise LengthMismatchError(f"{path}: file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad magic number 0x{magic:08X} (expected 0x{expected_magic:08X})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthMismatchError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload != expected:
        raise LengthMismatchError(
            f"{path}: header promises {expected} bytes of data, found {payload}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def bytes_to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def pad_to(images: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    """Pad (n, h, w) images symmetrically with background (-1) up to size x size."""
    n, h, w = images.shape
    if h >= size and w >= size:
        return images
    top, left = max(size - h, 0) // 2, max(size - w, 0) // 2
    out = np.full((n, max(h, size), max(w, size)), -1.0, dtype=images.dtype)
    out[:, top:top + h, left:left + w] = images
    return out


def load_mnist_idx(image_path, label_path=None, pad: bool = True) -> ImageDataset:
    """Read an IDX image file (and optional label file) into [-1, 1] tensors.

    28x28 images are padded with -1 to 32x32. Set ``pad=False`` to keep the
    native resolution (used by tests on tiny crafted files).
    """
    pixels = _read_idx(Path(image_path), IMAGE_MAGIC)
    images = bytes_to_unit(pixels)
    if pad and images.shape[1] == 28 and images.shape[2] == 28:
        images = pad_to(images)
    labels = None
    if label_path is not None:
        raw_labels = _read_idx(Path(label_path), LABEL_MAGIC)
        if raw_labels.shape[0] != images.shape[0]:
            raise ConsistencyError(
                f"image file has {images.shape[0]} items, label file has {raw_labels.shape[0]}")
        labels = [int(v) for v in raw_labels]
    return ImageDataset(torch.from_numpy(np.ascontiguousarray(images)).unsqueeze(1), labels)


def write_idx_images(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    header = struct.pack(">I", IMAGE_MAGIC) + struct.pack(f">{pixels.ndim}I", *pixels.shape)
    Path(path).write_bytes(header + pixels.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.shape[0]) + labels.tobytes())


def find_mnist(data_dir) -> tuple[Path, Optional[Path]]:
    """Locate the MNIST training files under ``data_dir`` (plain or with '.' separators)."""
    data_dir = Path(data_dir)
    for images_name, labels_name in [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
    ]:
        if (data_dir / images_name).exists():
            labels = data_dir / labels_name
            return data_dir / images_name, labels if labels.exists() else None
    raise ConfigError(f"no MNIST training images found in {data_dir}")


# toy generators ---------------------------------------------------------------

def _two_gaussians(gen, count, params):
    mean = np.asarray(params.get("mean", (3.0, 0.0)), dtype=np.float64)
    std = float(params.get("std", 1.0))
    signs = np.where(gen.random(count) < 0.5, -1.0, 1.0)
    return signs[:, None] * mean[None, :] + std * gen.standard_normal((count, 2))


def _gaussian_ring(gen, count, params):
    radius = float(params.get("radius", 3.0))
    modes = int(params.get("modes", 8))
    std = float(params.get("std", 0.3))
    k = gen.integers(0, modes, size=count)
    angle = 2 * np.pi * k / modes
    centers = radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centers + std * gen.standard_normal((count, 2))


def _single_gaussian(gen, count, params):
    mean = np.asarray(params.get("mean", (0.0, 0.0)), dtype=np.float64)
    var = float(params.get("var", 1.0))
    if var < 0:
        raise ConfigError("single_gaussian variance must be non-negative")
    return mean[None, :] + np.sqrt(var) * gen.standard_normal((count, 2))


TOY_GENERATORS = {
    "two_gaussians": _two_gaussians,
    "gaussian_ring": _gaussian_ring,
    "single_gaussian": _single_gaussian,
}


def make_toy(generator_name: str, count: int, seed: int, params: Optional[dict] = None) -> ToyDataset:
    if generator_name not in TOY_GENERATORS:
        raise ConfigError(
            f"unknown toy generator {generator_name!r}; choose from {sorted(TOY_GENERATORS)}")
    if count <= 0:
        raise ConfigError("toy dataset count must be positive")
    params = dict(params or {})
    points = TOY_GENERATORS[generator_name](philox(seed), count, params)
    return ToyDataset(torch.from_numpy(points.astype(np.float32)), generator_name, params)


def batch_iter(dataset: Union[ImageDataset, ToyDataset, torch.Tensor], batch_size: int,
               seed: int) -> Iterator[torch.Tensor]:
    """Yield one epoch of seeded, full-size batches; the partial tail is dropped."""
    data = dataset if isinstance(dataset, torch.Tensor) else dataset.tensor
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    if batch_size > data.shape[0]:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {data.shape[0]}")
    order = torch.from_numpy(philox(seed).permutation(data.shape[0]))
    for start in range(0, data.shape[0] - batch_size + 1, batch_size):
        yield data[order[start:start + batch_size]]
