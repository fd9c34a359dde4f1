"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, stream)`` so that a
worker holding only the key reproduces the same draws as a serial run.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

_KEY_MASK = (1 << 64) - 1


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    key = ((int(seed) & _KEY_MASK) << 64) | (int(stream) & _KEY_MASK)
    return np.random.Generator(np.random.Philox(key=key))


def sample_streams(seed: int, count: int, offset: int = 0) -> list[np.random.Generator]:
    """One private generator per sample index, keyed by (seed, index)."""
    return [philox(seed, offset + i) for i in range(count)]


def normal_from_streams(streams: Sequence[np.random.Generator], shape: Sequence[int],
                        dtype=torch.float32) -> torch.Tensor:
    if not streams:
        return torch.zeros((0, *shape), dtype=dtype)
    rows = np.stack([g.standard_normal(tuple(shape)) for g in streams])
    return torch.from_numpy(rows).to(dtype)


def draw_noise(seed: int, count: int, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """Initial noise for samples ``0..count-1`` of ``seed``; matches what the samplers draw."""
    return normal_from_streams(sample_streams(seed, count), shape, dtype)


class TorchRNG:
    """Batch-level normal/uniform/integer draws from one Philox stream."""

    def __init__(self, seed: int, stream: int = 0):
        self.gen = philox(seed, stream)

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.gen.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.gen.random(tuple(shape))).to(dtype)

    def integers(self, low: int, high: int, size: int) -> torch.Tensor:
        # inclusive of both ends
        return torch.from_numpy(self.gen.integers(low, high + 1, size=size)).long()

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)
