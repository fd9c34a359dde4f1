"""Ancestral and DDIM diffusion samplers, Euler/RK4 flow integrators, and trajectory files.

Every trajectory runs in generation order: ``times[0] = 0`` is the noise draw
and ``times[-1] = 1`` is the emitted sample. Diffusion step k maps to
generation time ``1 - k / T``; the backbone itself still receives ``k / T``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np
import torch

from . import backbone as bb
from .errors import ConfigError, IntegrationFault, IntegrityError
from .rng import normal_from_streams, sample_streams
from .schedules import NoiseSchedule, linear_beta_schedule

SAMPLERS = {"ancestral": "diffusion", "ddim": "diffusion", "euler": "flow", "rk4": "flow"}
TRAJ_FORMAT = "rectiflow-traj/1"

Field = Callable[[torch.Tensor, float], torch.Tensor]


@dataclass
class Trajectory:
    states: torch.Tensor  # (L, B, *sample_shape)
    times: list
    sampler_id: str
    nfe: int  # model evaluations per sample
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.times) != self.states.shape[0] or len(self.times) < 2:
            raise ValueError("a trajectory needs matching states/times with at least 2 entries")

    @property
    def initial(self) -> torch.Tensor:
        return self.states[0]

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]

    @property
    def batch_size(self) -> int:
        return self.states.shape[1]

    def path(self, i: int = 0) -> np.ndarray:
        """States of sample ``i`` flattened to (L, D) float64."""
        return self.states[:, i].reshape(self.states.shape[0], -1).double().numpy()

    def paths(self) -> np.ndarray:
        """All samples as (B, L, D) float64."""
        s = self.states.reshape(self.states.shape[0], self.states.shape[1], -1).double().numpy()
        return np.ascontiguousarray(s.transpose(1, 0, 2))

    def select(self, indices) -> "Trajectory":
        return Trajectory(self.states[:, indices], list(self.times), self.sampler_id, self.nfe,
                          self.steps, dict(self.meta))


class _Recorder:
    def __init__(self, x0: torch.Tensor, t0: float, record: bool, stride: int):
        if stride < 1:
            raise ConfigError("record stride must be >= 1")
        self.record, self.stride = record, stride
        self.states, self.times = [x0.clone()], [float(t0)]

    def add(self, step: int, total: int, x: torch.Tensor, t: float) -> None:
        last = step == total
        if last or (self.record and step % self.stride == 0):
            self.states.append(x.clone())
            self.times.append(float(t))

    def trajectory(self, sampler_id: str, nfe: int, steps: int, **meta) -> Trajectory:
        return Trajectory(torch.stack(self.states), self.times, sampler_id, nfe, steps, meta)


def _check_finite(x: torch.Tensor, step: int, sampler: str) -> None:
    if not torch.isfinite(x).all():
        raise IntegrationFault(f"{sampler}: non-finite state after step {step}", step=step)


# flow ODE integrators --------------------------------------------------------------

def integrate_euler(field: Field, x0: torch.Tensor, steps: int, record: bool = True,
                    stride: int = 1) -> Trajectory:
    """Explicit Euler from t=0 to t=1 with ``steps`` uniform steps."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    h = 1.0 / steps
    rec = _Recorder(x0, 0.0, record, stride)
    x = x0
    for i in range(steps):
        x = x + h * field(x, i * h)
        _check_finite(x, i + 1, "euler")
        rec.add(i + 1, steps, x, (i + 1) / steps)
    return rec.trajectory("euler", steps, steps)


def integrate_rk4(field: Field, x0: torch.Tensor, steps: int, record: bool = True,
                  stride: int = 1) -> Trajectory:
    """Classical fourth-order Runge-Kutta from t=0 to t=1."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    h = 1.0 / steps
    rec = _Recorder(x0, 0.0, record, stride)
    x = x0
    for i in range(steps):
        t = i * h
        k1 = field(x, t)
        k2 = field(x + (h / 2) * k1, t + h / 2)
        k3 = field(x + (h / 2) * k2, t + h / 2)
        k4 = field(x + h * k3, t + h)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_finite(x, i + 1, "rk4")
        rec.add(i + 1, steps, x, (i + 1) / steps)
    return rec.trajectory("rk4", 4 * steps, steps)


# diffusion samplers -----------------------------------------------------------------

def respaced_steps(T: int, steps: int) -> np.ndarray:
    """Descending uniform-stride subsequence of 1..T with ``steps`` entries, starting at T."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if steps > T:
        raise ConfigError(f"steps ({steps}) cannot exceed the schedule length T={T}")
    ks = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)[:-1]
    return ks


def _call_eps(model, x: torch.Tensor, k: int, T: int) -> torch.Tensor:
    t = torch.full((x.shape[0],), k / T, dtype=x.dtype)
    return model(x, t)


def _initial(seed: int, count: int, shape, x_init, dtype):
    streams = sample_streams(seed, count)
    x = normal_from_streams(streams, shape, dtype)
    if x_init is not None:
        if tuple(x_init.shape) != (count, *shape):
            raise ConfigError(f"x_init has shape {tuple(x_init.shape)}, expected {(count, *shape)}")
        x = x_init.to(dtype).clone()
    return x, streams


def sample_ancestral(model, sched: NoiseSchedule, steps: int, seed: int, record: bool = True,
                     count: int = 1, shape=(2,), x_init: Optional[torch.Tensor] = None,
                     stride: int = 1, dtype=torch.float32) -> Trajectory:
    """Stochastic reverse chain; each sample draws its noise from its own (seed, index) stream."""
    ks = respaced_steps(sched.T, steps)
    x, streams = _initial(seed, count, shape, x_init, dtype)
    rec = _Recorder(x, 0.0, record, stride)
    full = steps == sched.T
    for i, k in enumerate(ks):
        k_prev = int(ks[i + 1]) if i + 1 < len(ks) else 0
        ab, ab_prev = sched.alpha_bar_at(int(k)), sched.alpha_bar_at(k_prev)
        beta = float(sched.beta[k - 1]) if full else 1.0 - ab / ab_prev
        eps = _call_eps(model, x, int(k), sched.T)
        mean = (x - (beta / np.sqrt(1.0 - ab)) * eps) / np.sqrt(1.0 - beta)
        if k_prev > 0:
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab) * beta)
            x = mean + sigma * normal_from_streams(streams, shape, dtype)
        else:
            x = mean
        _check_finite(x, i + 1, "ancestral")
        rec.add(i + 1, steps, x, 1.0 - k_prev / sched.T)
    return rec.trajectory("ancestral", steps, steps, T=sched.T)


def sample_ddim(model, sched: NoiseSchedule, steps: int, record: bool = True,
                x_init: Optional[torch.Tensor] = None, count: int = 1, shape=(2,), seed: int = 0,
                stride: int = 1, dtype=torch.float32) -> Trajectory:
    """Deterministic (eta = 0) implicit sampler over the respaced steps."""
    ks = respaced_steps(sched.T, steps)
    x, _ = _initial(seed, count, shape, x_init, dtype)
    rec = _Recorder(x, 0.0, record, stride)
    for i, k in enumerate(ks):
        k_prev = int(ks[i + 1]) if i + 1 < len(ks) else 0
        ab, ab_prev = sched.alpha_bar_at(int(k)), sched.alpha_bar_at(k_prev)
        eps = _call_eps(model, x, int(k), sched.T)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
        _check_finite(x, i + 1, "ddim")
        rec.add(i + 1, steps, x, 1.0 - k_prev / sched.T)
    return rec.trajectory("ddim", steps, steps, T=sched.T)


# dispatch -----------------------------------------------------------------------------

@dataclass
class LoadedModel:
    """A backbone ready for sampling: no-grad callable plus paradigm and schedule."""

    net: Callable
    paradigm: str
    config: bb.BackboneConfig
    schedule: Optional[NoiseSchedule] = None

    def __call__(self, x, t):
        with torch.no_grad():
            return self.net(x, t)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.config.in_shape)


def as_loaded(obj) -> LoadedModel:
    if isinstance(obj, LoadedModel):
        return obj
    if isinstance(obj, (str, Path)):
        obj = bb.load(obj)
    if isinstance(obj, bb.Checkpoint):
        sched = linear_beta_schedule(**obj.schedule) if obj.paradigm == "diffusion" else None
        if obj.paradigm == "diffusion" and obj.schedule is None:
            sched = linear_beta_schedule()
        return LoadedModel(obj.model(), obj.paradigm, obj.config, sched)
    raise ConfigError(f"cannot sample from {type(obj).__name__}")


def flow_field(model) -> Field:
    def field(x, t):
        return model(x, torch.full((x.shape[0],), float(t), dtype=x.dtype))
    return field


@dataclass
class GenerateResult:
    samples: torch.Tensor  # raw final states
    exported: torch.Tensor  # clamped to [-1, 1] for image data, raw otherwise
    trajectory: Optional[Trajectory]


def run_sampler(model: LoadedModel, sampler_id: str, steps: int, x_init: torch.Tensor, seed: int,
                record: bool = True, stride: int = 1) -> Trajectory:
    """Run one sampler from an explicit initial batch (noise streams still keyed by ``seed``)."""
    if sampler_id not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler_id!r}; choose from {sorted(SAMPLERS)}")
    if SAMPLERS[sampler_id] != model.paradigm:
        raise ConfigError(f"sampler {sampler_id!r} needs a {SAMPLERS[sampler_id]} model, "
                          f"got a {model.paradigm} checkpoint")
    count, shape = x_init.shape[0], tuple(x_init.shape[1:])
    if sampler_id == "euler":
        return integrate_euler(flow_field(model), x_init, steps, record, stride)
    if sampler_id == "rk4":
        return integrate_rk4(flow_field(model), x_init, steps, record, stride)
    if sampler_id == "ddim":
        return sample_ddim(model, model.schedule, steps, record, x_init=x_init, count=count, shape=shape,
                           seed=seed, stride=stride, dtype=x_init.dtype)
    return sample_ancestral(model, model.schedule, steps, seed, record, count=count, shape=shape,
                            x_init=x_init, stride=stride, dtype=x_init.dtype)


def generate(model_ckpt, sampler_id: str, steps: int, count: int, seed: int, record: bool = False,
             stride: int = 1) -> GenerateResult:
    """Draw ``count`` samples; sample i starts from the noise of stream (seed, i)."""
    model = as_loaded(model_ckpt)
    if sampler_id not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler_id!r}; choose from {sorted(SAMPLERS)}")
    if SAMPLERS[sampler_id] != model.paradigm:
        raise ConfigError(f"sampler {sampler_id!r} needs a {SAMPLERS[sampler_id]} model, "
                          f"got a {model.paradigm} checkpoint")
    if count < 0:
        raise ConfigError("count must be non-negative")
    shape = model.sample_shape
    if count == 0:
        empty = torch.zeros((0, *shape))
        return GenerateResult(empty, empty, None)
    x_init = normal_from_streams(sample_streams(seed, count), shape)
    traj = run_sampler(model, sampler_id, steps, x_init, seed, record, stride)
    final = traj.final
    exported = final.clamp(-1.0, 1.0) if len(shape) == 3 else final
    return GenerateResult(final, exported, traj if record else None)


# trajectory files -----------------------------------------------------------------------

def save_trajectory(traj: Trajectory, path) -> None:
    """Directory with ``manifest.json`` and little-endian float32 ``states.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = np.ascontiguousarray(traj.states.to(torch.float32).numpy(), dtype="<f4").tobytes()
    manifest = {
        "format": TRAJ_FORMAT,
        "sampler_id": traj.sampler_id,
        "times": [float(t) for t in traj.times],
        "shape": list(traj.states.shape),
        "nfe": traj.nfe,
        "steps": traj.steps,
        "meta": traj.meta,
        "blob_bytes": len(blob),
    }
    (path / "states.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != TRAJ_FORMAT:
        raise IntegrityError(f"unsupported trajectory format {manifest.get('format')!r}")
    blob = (path / "states.bin").read_bytes()
    shape = manifest["shape"]
    if len(blob) != 4 * int(np.prod(shape)) or len(blob) != manifest["blob_bytes"]:
        raise IntegrityError("trajectory blob length does not match its manifest", entry="states")
    states = torch.from_numpy(np.frombuffer(blob, dtype="<f4").astype(np.float32).reshape(shape))
    return Trajectory(states, manifest["times"], manifest["sampler_id"], manifest["nfe"],
                      manifest.get("steps", 0), manifest.get("meta", {}))


def sampler_for(paradigm: str, deterministic: bool = False) -> str:
    if paradigm == "flow":
        return "euler"
    return "ddim" if deterministic else "ancestral"


Model = Union[LoadedModel, bb.Checkpoint, str, Path]
