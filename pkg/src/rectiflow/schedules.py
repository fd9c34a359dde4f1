"""Forward processes: the variance-preserving diffusion chain and the linear flow interpolant."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DomainError, ShapeError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance tables indexed 0..T-1 for steps k = 1..T (64-bit)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, k: int) -> float:
        """ᾱ at step k in 0..T; k = 0 is the clean data (ᾱ = 1)."""
        return 1.0 if k == 0 else float(self.alpha_bar[k - 1])

    def params(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def linear_beta_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), beta, alpha, alpha_bar)


def step_to_time(k, T: int):
    """Continuous time fed to the backbone for diffusion step k: t = k / T."""
    return k / T


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _per_sample(values, x: torch.Tensor) -> torch.Tensor:
    v = values.to(x.dtype) if isinstance(values, torch.Tensor) else torch.as_tensor(values, dtype=x.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (x.ndim - 1)))


def diffusion_forward(x0: torch.Tensor, k, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form noisy sample at step k (scalar or one index per sample)."""
    _check_same_shape(x0, eps, "diffusion_forward")
    k_arr = np.asarray(k)
    if k_arr.size == 0 or k_arr.min() < 1 or k_arr.max() > sched.T:
        raise DomainError(f"step index must lie in 1..{sched.T}")
    ab = sched.alpha_bar[k_arr - 1]
    signal = _per_sample(np.sqrt(ab), x0)
    noise = _per_sample(np.sqrt(1.0 - ab), x0)
    return signal * x0 + noise * eps


def fm_interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Point on the straight path from noise x0 (t=0) to data x1 (t=1)."""
    _check_same_shape(x0, x1, "fm_interpolate")
    if isinstance(t, (np.ndarray, list, tuple)):
        t = torch.as_tensor(np.asarray(t, dtype=np.float64))
    if isinstance(t, torch.Tensor) and t.ndim == 0:
        t = float(t)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise DomainError("t must lie in [0, 1]")
        return x0 + _per_sample(t, x0) * (x1 - x0)
    tf = float(t)
    if not 0.0 <= tf <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {tf}")
    if tf == 0.0:
        return x0.clone()
    if tf == 1.0:
        return x1.clone()
    return x0 + tf * (x1 - x0)


def fm_target_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x0, x1, "fm_target_velocity")
    return x1 - x0
