"""Path geometry of sampling trajectories: straightness, kinetic energy, curvature
statistics, velocity-field plane projections and latent interpolation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import torch

from .errors import (AnalysisError, DegeneratePlaneError, DegenerateTrajectoryError, DomainError,
                     ShapeError)
from .rng import draw_noise, philox
from .samplers import SAMPLERS, LoadedModel, Trajectory, as_loaded, generate, run_sampler

CHORD_EPS = 1e-8
HIST_BINS = 30

PathLike = Union[Trajectory, np.ndarray, torch.Tensor]


def _as_path(path: PathLike) -> np.ndarray:
    if isinstance(path, Trajectory):
        if path.batch_size != 1:
            raise ShapeError("trajectory holds several samples; use the *_ratios helpers or .path(i)")
        return path.path(0)
    arr = path.double().numpy() if isinstance(path, torch.Tensor) else np.asarray(path, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr.reshape(arr.shape[0], -1)


def _times(path: PathLike, times) -> np.ndarray:
    if times is None:
        if isinstance(path, Trajectory):
            times = path.times
        else:
            n = _as_path(path).shape[0]
            times = np.linspace(0.0, 1.0, n)
    return np.asarray(times, dtype=np.float64)


def straightness_ratio(path: PathLike) -> float:
    """Path length over chord length; 1.0 for a straight, monotone path."""
    x = _as_path(path)
    if x.shape[0] < 2:
        raise DegenerateTrajectoryError("need at least two states")
    chord = float(np.linalg.norm(x[-1] - x[0]))
    if chord < CHORD_EPS:
        raise DegenerateTrajectoryError(f"chord length {chord:.3g} below {CHORD_EPS}")
    length = float(np.linalg.norm(np.diff(x, axis=0), axis=1).sum())
    return length / chord


def straightness_ratios(traj: Trajectory) -> np.ndarray:
    """Per-sample ratios; degenerate samples come back as NaN."""
    p = traj.paths()
    length = np.linalg.norm(np.diff(p, axis=1), axis=2).sum(axis=1)
    chord = np.linalg.norm(p[:, -1] - p[:, 0], axis=1)
    out = np.full(p.shape[0], np.nan)
    ok = chord >= CHORD_EPS
    out[ok] = length[ok] / chord[ok]
    return out


def kinetic_energy(path: PathLike, times=None) -> float:
    """Discrete action sum(|dx|^2 / dt); equals |x_N - x_0|^2 for a constant-speed line on [0, 1]."""
    x = _as_path(path)
    t = _times(path, times)
    if t.shape[0] != x.shape[0]:
        raise ShapeError("times and states differ in length")
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise DomainError("times must be strictly increasing")
    return float((np.sum(np.diff(x, axis=0) ** 2, axis=1) / dt).sum())


def kinetic_energies(traj: Trajectory) -> np.ndarray:
    p = traj.paths()
    dt = np.diff(np.asarray(traj.times, dtype=np.float64))
    if np.any(dt <= 0):
        raise DomainError("times must be strictly increasing")
    return (np.sum(np.diff(p, axis=1) ** 2, axis=2) / dt).sum(axis=1)


def _uniform_step(t: np.ndarray) -> float:
    dt = np.diff(t)
    if dt.size == 0 or np.any(dt <= 0) or np.ptp(dt) > 1e-9 * abs(dt.mean()):
        raise DomainError("second differences need strictly increasing, uniform times (resample first)")
    return float(dt.mean())


def straightness_second_derivative(path: PathLike, times=None) -> float:
    """Mean norm of the central second difference divided by h^2 over interior states."""
    x = _as_path(path)
    if x.shape[0] < 3:
        raise DomainError("need at least three states")
    h = _uniform_step(_times(path, times))
    acc = x[2:] - 2 * x[1:-1] + x[:-2]
    return float(np.linalg.norm(acc, axis=1).mean() / h ** 2)


def second_derivatives(traj: Trajectory) -> np.ndarray:
    p = traj.paths()
    if p.shape[1] < 3:
        raise DomainError("need at least three states")
    h = _uniform_step(np.asarray(traj.times, dtype=np.float64))
    acc = p[:, 2:] - 2 * p[:, 1:-1] + p[:, :-2]
    return np.linalg.norm(acc, axis=2).mean(axis=1) / h ** 2


# curvature statistics ---------------------------------------------------------------

@dataclass
class CurvatureStats:
    samples: np.ndarray  # C of the non-degenerate trajectories
    mean: float
    std: float
    min: float
    max: float
    histogram: tuple  # (edges, counts)
    sampler_id: str
    n: int
    degenerate: int = 0
    steps: int = 0
    energies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    second_derivs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def summary(self) -> dict:
        return {
            "sampler_id": self.sampler_id,
            "steps": self.steps,
            "n": self.n,
            "degenerate": self.degenerate,
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "stderr": self.std / np.sqrt(max(len(self.samples), 1)),
            "energy_mean": float(np.mean(self.energies)) if len(self.energies) else None,
            "second_derivative_mean": float(np.mean(self.second_derivs)) if len(self.second_derivs) else None,
        }


def stats_from_trajectory(traj: Trajectory, sampler_id: Optional[str] = None) -> CurvatureStats:
    ratios = straightness_ratios(traj)
    ok = ~np.isnan(ratios)
    if not ok.any():
        raise AnalysisError("every trajectory is degenerate; curvature undefined")
    c = ratios[ok]
    upper = max(float(c.max()), 1.0 + 1e-9)
    counts, edges = np.histogram(np.clip(c, 1.0, upper), bins=HIST_BINS, range=(1.0, upper))
    energies = kinetic_energies(traj)[ok]
    try:
        second = second_derivatives(traj)[ok]
    except DomainError:
        second = np.zeros(0)
    return CurvatureStats(
        samples=c, mean=float(c.mean()), std=float(c.std(ddof=1)) if c.size > 1 else 0.0,
        min=float(c.min()), max=float(c.max()), histogram=(edges, counts),
        sampler_id=sampler_id or traj.sampler_id, n=int(ratios.size), degenerate=int((~ok).sum()),
        steps=traj.steps, energies=energies, second_derivs=second)


def curvature_stats(model_ckpt, sampler_id: str, steps: int, n: int = 100, seed: int = 0) -> CurvatureStats:
    """Straightness of ``n`` recorded trajectories; sample i starts from stream (seed, i)."""
    if n < 2:
        raise AnalysisError("curvature statistics need n >= 2")
    result = generate(model_ckpt, sampler_id, steps, n, seed, record=True)
    return stats_from_trajectory(result.trajectory, sampler_id)


def pooled_gap(a: CurvatureStats, b: CurvatureStats) -> float:
    """(mean_b - mean_a) in units of the pooled standard error of the two means."""
    se = np.sqrt(a.std ** 2 / len(a.samples) + b.std ** 2 / len(b.samples))
    return float((b.mean - a.mean) / se) if se > 0 else float("inf")


# plane projection ---------------------------------------------------------------------

@dataclass
class PlaneProjection:
    basis: np.ndarray  # (2, D) orthonormal rows e1, e2
    origin: np.ndarray  # (D,)
    grid: np.ndarray  # (R, R, 2) plane coordinates (u, v)
    arrows: np.ndarray  # (R, R, 2) projected velocities
    t_eval: float
    end_coords: tuple = (0.0, 0.0)

    def chord_mask(self, tol: float = 1e-9) -> np.ndarray:
        """Grid points on the segment from x_start (0, 0) to x_end (|d|, 0)."""
        u, v = self.grid[..., 0], self.grid[..., 1]
        length = self.end_coords[0]
        return (np.abs(v) <= tol * max(length, 1.0)) & (u >= -tol) & (u <= length * (1 + tol))

    def mean_along_chord(self) -> float:
        return float(self.arrows[..., 0][self.chord_mask()].mean())


def project_field(model_ckpt, x_start: torch.Tensor, x_end: torch.Tensor, grid_res: int = 21,
                  extent: float = 1.0, t_eval: float = 0.5, seed: int = 0) -> PlaneProjection:
    """Sample the velocity field on the plane through x_start spanned by (x_end - x_start) and a
    seeded random direction; the lattice spans |u|, |v| <= extent * |x_end - x_start|."""
    model = as_loaded(model_ckpt)
    if model.paradigm != "flow":
        raise AnalysisError("field projection needs a flow checkpoint")
    shape = model.sample_shape
    a = x_start.reshape(-1).double().numpy()
    b = x_end.reshape(-1).double().numpy()
    if a.shape != b.shape:
        raise ShapeError("x_start and x_end differ in shape")
    d = b - a
    length = float(np.linalg.norm(d))
    if length < CHORD_EPS:
        raise DegeneratePlaneError("x_start and x_end coincide; the plane is undefined")
    if grid_res < 2:
        raise AnalysisError("grid_res must be >= 2")
    e1 = d / length
    r = philox(seed, 7).standard_normal(a.shape[0])
    r -= (r @ e1) * e1
    if np.linalg.norm(r) < 1e-12:
        raise DegeneratePlaneError("random direction collinear with the chord")
    e2 = r / np.linalg.norm(r)
    e2 -= (e2 @ e1) * e1
    e2 /= np.linalg.norm(e2)
    ticks = np.linspace(-extent * length, extent * length, grid_res)
    uu, vv = np.meshgrid(ticks, ticks, indexing="xy")
    grid = np.stack([uu, vv], axis=-1)
    points = a[None, :] + uu.reshape(-1, 1) * e1[None] + vv.reshape(-1, 1) * e2[None]
    x = torch.from_numpy(points).to(torch.float32).reshape(-1, *shape)
    vel = model(x, torch.full((x.shape[0],), float(t_eval))).reshape(x.shape[0], -1).double().numpy()
    arrows = np.stack([vel @ e1, vel @ e2], axis=-1).reshape(grid_res, grid_res, 2)
    return PlaneProjection(np.stack([e1, e2]), a, grid, arrows, float(t_eval), (length, 0.0))


# latent interpolation -----------------------------------------------------------------------

def latent_interpolation(model_ckpt, z_a: torch.Tensor, z_b: torch.Tensor, K: int, steps: int,
                         sampler_id: str = "euler", seed: int = 0) -> torch.Tensor:
    """Samples from z(lam) = (1 - lam) z_a + lam z_b at K + 2 evenly spaced lam including both ends.

    Each frame is generated on its own so the endpoints match single-sample
    ``generate`` calls bit for bit.
    """
    model = as_loaded(model_ckpt)
    if z_a.shape != z_b.shape:
        raise ShapeError(f"z_a {tuple(z_a.shape)} and z_b {tuple(z_b.shape)} differ in shape")
    if K < 0:
        raise AnalysisError("K must be non-negative")
    if SAMPLERS.get(sampler_id) != model.paradigm:
        raise AnalysisError(f"sampler {sampler_id!r} does not match a {model.paradigm} model")
    z_a = z_a.reshape(1, *model.sample_shape)
    z_b = z_b.reshape(1, *model.sample_shape)
    lams = np.linspace(0.0, 1.0, K + 2)
    frames = []
    for i, lam in enumerate(lams):
        if i == 0:
            z = z_a.clone()
        elif i == len(lams) - 1:
            z = z_b.clone()
        else:
            z = (1.0 - lam) * z_a + lam * z_b
        frames.append(run_sampler(model, sampler_id, steps, z, seed, record=False).final[0])
    return torch.stack(frames)


def interpolation_smoothness(frames: torch.Tensor) -> tuple[np.ndarray, float]:
    """Mean absolute difference of adjacent frames and the max/median ratio of those differences."""
    f = frames.reshape(frames.shape[0], -1).double().numpy()
    diffs = np.abs(np.diff(f, axis=0)).mean(axis=1)
    med = float(np.median(diffs))
    return diffs, float(diffs.max() / med) if med > 0 else float("inf")


def endpoint_noise(seed_a: int, seed_b: int, shape) -> tuple[torch.Tensor, torch.Tensor]:
    """The initial noise that ``generate(seed=seed_a, count=1)`` and ``seed_b`` would use."""
    return draw_noise(seed_a, 1, shape)[0], draw_noise(seed_b, 1, shape)[0]
