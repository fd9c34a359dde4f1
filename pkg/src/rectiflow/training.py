"""Noise-prediction and velocity-regression objectives and the training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import backbone as bb
from .data import ImageDataset, ToyDataset, batch_iter, make_toy
from .errors import ConfigError, TrainingFault
from .rng import TorchRNG
from .schedules import (NoiseSchedule, diffusion_forward, fm_interpolate, fm_target_velocity,
                        linear_beta_schedule, step_to_time)

log = logging.getLogger(__name__)

PARADIGMS = ("diffusion", "flow")


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "flow"
    steps: int = 1000
    batch_size: int = 256
    learning_rate: float = 2e-4
    seed: int = 0
    backbone: bb.BackboneConfig = field(default_factory=lambda: bb.preset_config("toy_mlp"))
    schedule: Optional[dict] = None  # T, beta_start, beta_end (diffusion only)
    log_every: int = 100
    betas: tuple = (0.9, 0.999)
    clip_grad: Optional[float] = None

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.log_every <= 0:
            raise ConfigError("log_every must be positive")

    def noise_schedule(self) -> Optional[NoiseSchedule]:
        if self.paradigm != "diffusion":
            return None
        return linear_beta_schedule(**(self.schedule or {}))


def _mse(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    return ((target - pred) ** 2).mean()


def diffusion_loss(model: Callable, batch: torch.Tensor, sched: NoiseSchedule, rng: TorchRNG,
                   steps=None, noise=None) -> torch.Tensor:
    """Mean squared error between the injected noise and the model's prediction of it.

    ``steps`` (per-sample k in 1..T) and ``noise`` override the draws from ``rng``.
    """
    n = batch.shape[0]
    k = rng.integers(1, sched.T, n).numpy() if steps is None else np.asarray(steps)
    eps = rng.normal(batch.shape, batch.dtype) if noise is None else noise
    x_t = diffusion_forward(batch, k, eps, sched)
    t = step_to_time(torch.from_numpy(k).to(batch.dtype), sched.T)
    return _mse(eps, model(x_t, t))


def fm_loss(model: Callable, batch: torch.Tensor, rng: TorchRNG, times=None, noise=None) -> torch.Tensor:
    """Regress the model's velocity onto ``x1 - x0`` along the straight interpolant."""
    n = batch.shape[0]
    x0 = rng.normal(batch.shape, batch.dtype) if noise is None else noise
    t = rng.uniform((n,), batch.dtype) if times is None else torch.as_tensor(times, dtype=batch.dtype)
    x_t = fm_interpolate(x0, batch, t)
    return _mse(fm_target_velocity(x0, batch), model(x_t, t))


def _epochs(data: torch.Tensor, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from batch_iter(data, batch_size, seed * 1_000_003 + epoch)
        epoch += 1


@dataclass
class LossRecord:
    step: int
    loss: float
    wall_ms: float


def train(config: TrainConfig, dataset, log_path=None, on_log=None,
          deterministic: bool = True, record_wall: bool = True) -> bb.Checkpoint:
    """Run Adam on the configured objective and return the final checkpoint.

    The loss log (mean loss over each ``log_every`` window) is appended to
    ``train_meta['loss_log']`` and written as CSV to ``log_path`` when given.
    """
    data = dataset if isinstance(dataset, torch.Tensor) else dataset.tensor
    if data.shape[0] == 0:
        raise ConfigError("training dataset is empty")
    if tuple(data.shape[1:]) != tuple(config.backbone.in_shape):
        raise ConfigError(f"dataset items have shape {tuple(data.shape[1:])}, "
                          f"backbone expects {tuple(config.backbone.in_shape)}")
    if deterministic:
        torch.set_num_threads(1)
    sched = config.noise_schedule()
    model = bb.build(config.backbone)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=tuple(config.betas))
    rng = TorchRNG(config.seed, stream=1)
    batches = _epochs(data, min(config.batch_size, data.shape[0]), config.seed)

    records: list[LossRecord] = []
    window: list[float] = []
    first_loss = None
    last_loss = float("nan")
    start = time.perf_counter()
    for step in range(1, config.steps + 1):
        batch = next(batches).to(torch.float32)
        if config.paradigm == "diffusion":
            loss = diffusion_loss(model, batch, sched, rng)
        else:
            loss = fm_loss(model, batch, rng)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingFault(f"non-finite loss {value} at step {step}", step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.clip_grad:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_grad)
        opt.step()
        first_loss = value if first_loss is None else first_loss
        last_loss = value
        window.append(value)
        if step % config.log_every == 0 or step == config.steps:
            wall = (time.perf_counter() - start) * 1000.0 if record_wall else 0.0
            rec = LossRecord(step, float(np.mean(window)), round(wall, 3))
            records.append(rec)
            window = []
            log.info("step %d loss %.5f", rec.step, rec.loss)
            if on_log is not None:
                on_log(rec)

    model.eval()
    meta = {
        "steps": config.steps,
        "seed": config.seed,
        "final_loss": last_loss if config.steps else None,
        "initial_loss": first_loss,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "loss_log": [[r.step, r.loss] for r in records],
    }
    ckpt = bb.checkpoint_from_model(model, config.paradigm, meta,
                                    sched.params() if sched is not None else None)
    if log_path is not None:
        write_loss_csv(log_path, records)
    return ckpt


def write_loss_csv(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "wall_ms"])
        for r in records:
            writer.writerow([r.step, repr(r.loss), r.wall_ms])


# gradient checking ------------------------------------------------------------------

GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps roundoff on vanishing gradients from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def central_differences(loss_of: Callable[[torch.Tensor], torch.Tensor], theta: torch.Tensor,
                        epsilon: float, chunk: int = 512) -> torch.Tensor:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    batched = torch.func.vmap(loss_of)
    out = torch.empty_like(theta)
    n = theta.numel()
    for start in range(0, n, chunk):
        idx = torch.arange(start, min(start + chunk, n))
        rows = torch.arange(len(idx))
        probe = theta.repeat(len(idx), 1)
        probe[rows, idx] += epsilon
        up = batched(probe)
        probe[rows, idx] -= 2 * epsilon
        down = batched(probe)
        out[idx] = (up - down) / (2 * epsilon)
    return out


def _functional(model):
    names = [n for n, _ in model.named_parameters()]
    shapes = [p.shape for _, p in model.named_parameters()]
    sizes = [int(np.prod(s)) for s in shapes]
    theta = torch.cat([p.detach().reshape(-1) for p in model.parameters()])

    def call(vec, x, t):
        params = {n: v.reshape(s) for n, v, s in zip(names, torch.split(vec, sizes), shapes)}
        return torch.func.functional_call(model, params, (x, t))

    return theta, call


def grad_check(config: Optional[TrainConfig] = None, loss_kind: str = "flow", epsilon: float = 1e-5,
               batch_size: int = 8, seed: int = 0) -> float:
    """Max relative error between autograd and central-difference gradients, in float64.

    ``loss_kind`` is ``flow``, ``diffusion`` or ``quadratic`` (the stub loss
    ``sum(theta**2)`` over a small positive random vector). All random draws of the
    objective are frozen before differencing, and the normally zero output
    layer is randomized so every parameter carries a gradient.
    """
    if loss_kind not in ("flow", "diffusion", "quadratic"):
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "quadratic":
        theta = torch.from_numpy(np.random.default_rng(seed).uniform(0.5, 2.0, 16))
        analytic = 2 * theta
        numeric = central_differences(lambda v: (v ** 2).sum(), theta, epsilon)
        return float(relative_error(analytic.numpy(), numeric.numpy()).max())

    if config is None:
        config = TrainConfig(paradigm=loss_kind, backbone=bb.preset_config("toy_mlp", seed=seed), seed=seed,
                             schedule={"T": 1000} if loss_kind == "diffusion" else None)
    model = bb.build(config.backbone, dtype=torch.float64)
    bb.randomize_output_layer(model, seed + 17)
    shape = tuple(config.backbone.in_shape)
    if shape == (2,):
        batch = make_toy("two_gaussians", batch_size, seed).points.to(torch.float64)
    else:
        batch = torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, (batch_size, *shape)))
    rng = TorchRNG(seed, stream=99)
    noise = rng.normal(batch.shape, torch.float64)
    theta, call = _functional(model)
    if loss_kind == "diffusion":
        sched = linear_beta_schedule(**(config.schedule or {}))
        steps = rng.integers(1, sched.T, batch_size).numpy()

        def loss_of(vec):
            return diffusion_loss(lambda x, t: call(vec, x, t), batch, sched, None, steps=steps, noise=noise)
    else:
        times = rng.uniform((batch_size,), torch.float64)

        def loss_of(vec):
            return fm_loss(lambda x, t: call(vec, x, t), batch, None, times=times, noise=noise)

    analytic = torch.func.grad(loss_of)(theta)
    numeric = central_differences(loss_of, theta, epsilon)
    return float(relative_error(analytic.numpy(), numeric.numpy()).max())


def shared_architecture_check(flow_ckpt: bb.Checkpoint, diff_ckpt: bb.Checkpoint) -> None:
    from .errors import ComparisonInvalidError

    if not bb.same_architecture(flow_ckpt.config, diff_ckpt.config):
        raise ComparisonInvalidError(
            f"checkpoints use different backbones: {flow_ckpt.config.preset} vs {diff_ckpt.config.preset}")
    if flow_ckpt.param_count() != diff_ckpt.param_count():
        raise ComparisonInvalidError("checkpoints have different parameter counts")


def toy_train_config(paradigm: str, steps: int = 4000, seed: int = 0, lr: float = 1e-3,
                     batch_size: int = 256) -> TrainConfig:
    return TrainConfig(paradigm=paradigm, steps=steps, batch_size=batch_size, learning_rate=lr,
                       seed=seed, backbone=bb.preset_config("toy_mlp", seed=seed),
                       schedule={"T": 1000, "beta_start": 1e-4, "beta_end": 0.02}
                       if paradigm == "diffusion" else None, log_every=100)


def with_steps(config: TrainConfig, steps: int) -> TrainConfig:
    return replace(config, steps=steps)
