"""Fidelity, solver and latency experiments with structured, serializable reports."""
from __future__ import annotations

import csv
import gc
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import backbone as bb
from .errors import ComparisonInvalidError, ConfigError, ShapeError
from .samplers import SAMPLERS, LoadedModel, as_loaded, generate

SHRINKAGE = 1e-6
EXPERIMENTS = ("steps", "solver", "latency")


# Fréchet distance ---------------------------------------------------------------------

def _clip_eigs(w: np.ndarray) -> np.ndarray:
    # negative eigenvalues of a PSD product are roundoff; small positive ones (e.g. from the
    # shrinkage ridge) are real mass and must stay in the trace
    return np.where(w < 0.0, 0.0, w)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(_clip_eigs(w))) @ v.T


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("features must be a (n, d) matrix")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if x.shape[0] < x.shape[1] + 1:
        cov = cov + SHRINKAGE * np.eye(x.shape[1])
    return mu, cov


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + tr(A + B - 2 (A B)^(1/2)) with the root taken on A^(1/2) B A^(1/2)."""
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = float(np.sqrt(_clip_eigs(w)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def frechet_distance(set_a, set_b) -> float:
    a = set_a.reshape(set_a.shape[0], -1).double().numpy() if isinstance(set_a, torch.Tensor) \
        else np.asarray(set_a, dtype=np.float64).reshape(len(set_a), -1)
    b = set_b.reshape(set_b.shape[0], -1).double().numpy() if isinstance(set_b, torch.Tensor) \
        else np.asarray(set_b, dtype=np.float64).reshape(len(set_b), -1)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    return frechet_from_stats(*gaussian_stats(a), *gaussian_stats(b))


@dataclass
class FrechetFeatureSpace:
    kind: str = "pixel"
    feature_dim: int = 0
    extractor: Optional[torch.nn.Module] = None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind == "pixel":
            return x.reshape(x.shape[0], -1)
        if self.kind == "classifier":
            if self.extractor is None:
                raise ConfigError("classifier feature space needs a trained extractor")
            with torch.no_grad():
                return self.extractor.features(x.to(torch.float32))
        raise ConfigError(f"unknown feature space {self.kind!r}")

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> float:
        return frechet_distance(self.features(a), self.features(b))


def pixel_space(sample_shape) -> FrechetFeatureSpace:
    return FrechetFeatureSpace("pixel", int(np.prod(sample_shape)))


class DigitClassifier(torch.nn.Module):
    """Small convnet whose penultimate activations serve as an optional feature space."""

    def __init__(self, feature_dim: int = 64, classes: int = 10):
        super().__init__()
        self.body = torch.nn.Sequential(
            torch.nn.Conv2d(1, 16, 3, stride=2, padding=1), torch.nn.SiLU(),
            torch.nn.Conv2d(16, 32, 3, stride=2, padding=1), torch.nn.SiLU(),
            torch.nn.AdaptiveAvgPool2d(4), torch.nn.Flatten(),
            torch.nn.Linear(32 * 16, feature_dim), torch.nn.SiLU())
        self.head = torch.nn.Linear(feature_dim, classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))


def train_classifier_space(images: torch.Tensor, labels: Sequence[int], steps: int = 500,
                           seed: int = 0, feature_dim: int = 64) -> FrechetFeatureSpace:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    net = DigitClassifier(feature_dim, classes=max(labels) + 1)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    y = torch.as_tensor(list(labels))
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(128, images.shape[0]),), generator=gen)
        loss = torch.nn.functional.cross_entropy(net(images[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    return FrechetFeatureSpace("classifier", feature_dim, net)


# reports --------------------------------------------------------------------------------

@dataclass
class Row:
    config: str
    metric: str
    value: float
    unit: str = ""
    sweep: float = 0.0


def environment() -> dict:
    return {"cores": os.cpu_count(), "torch_threads": torch.get_num_threads(),
            "precision": "float32", "torch": torch.__version__.split("+")[0]}


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class BenchReport:
    experiment: str
    rows: list
    seed: int
    environment: dict = field(default_factory=environment)
    timestamp: str = field(default_factory=utc_now)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        for row in self.rows:
            if not math.isfinite(row.value):
                raise ValueError(f"non-finite metric {row.metric} for {row.config}")
        self.rows = sorted(self.rows, key=lambda r: r.sweep)

    def value(self, config: str, metric: str) -> float:
        for row in self.rows:
            if row.config == config and row.metric == metric:
                return row.value
        raise KeyError((config, metric))

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "seed": self.seed, "timestamp": self.timestamp,
                "environment": self.environment, "rows": [asdict(r) for r in self.rows],
                "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["config", "metric", "value", "unit", "sweep"])
        for r in self.rows:
            writer.writerow([r.config, r.metric, repr(float(r.value)), r.unit, repr(float(r.sweep))])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())
        return out


def _require_shared(flow: LoadedModel, diff: LoadedModel) -> None:
    if not bb.same_architecture(flow.config, diff.config):
        raise ComparisonInvalidError(
            f"flow ({flow.config.preset}) and diffusion ({diff.config.preset}) checkpoints "
            "do not share a backbone configuration")
    if flow.paradigm != "flow" or diff.paradigm != "diffusion":
        raise ComparisonInvalidError("expected one flow and one diffusion checkpoint")


def _save_grid(samples: torch.Tensor, grid_dir, name: str) -> None:
    if grid_dir is None:
        return
    from .viz import save_samples

    save_samples(samples, Path(grid_dir) / f"{name}.png")


def step_ablation(ckpt_flow, ckpt_diff, step_counts: Sequence[int], count: int, seed: int,
                  real: torch.Tensor, feature_space: Optional[FrechetFeatureSpace] = None,
                  grid_dir=None, timestamp: Optional[str] = None) -> BenchReport:
    """FD to ``real`` for flow/euler and diffusion/ancestral at each step count."""
    flow, diff = as_loaded(ckpt_flow), as_loaded(ckpt_diff)
    _require_shared(flow, diff)
    space = feature_space or pixel_space(flow.sample_shape)
    rows = []
    for n in sorted(step_counts):
        for tag, model, sampler in (("flow", flow, "euler"), ("diffusion", diff, "ancestral")):
            out = generate(model, sampler, n, count, seed)
            rows.append(Row(f"{tag}/{sampler}/N={n}", "fd", space.distance(out.samples, real), space.kind, n))
            _save_grid(out.exported, grid_dir, f"{tag}_{sampler}_N{n}")
    kw = {"timestamp": timestamp} if timestamp else {}
    return BenchReport("steps", rows, seed, extra={"count": count, "feature_space": space.kind}, **kw)


def nfe_of(sampler_id: str, steps: int) -> int:
    if sampler_id not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler_id!r}")
    return 4 * steps if sampler_id == "rk4" else steps


def nfe_matched_pairs(euler_steps: Sequence[int]) -> list:
    pairs = []
    for n in euler_steps:
        if n % 4:
            raise ConfigError(f"NFE-matched comparison needs N divisible by 4, got {n}")
        pairs += [("euler", n), ("rk4", n // 4)]
    return pairs


def solver_sensitivity(ckpt_flow, configs: Sequence[tuple], count: int, seed: int, real: torch.Tensor,
                       matched: str = "nfe", feature_space: Optional[FrechetFeatureSpace] = None,
                       grid_dir=None, timestamp: Optional[str] = None) -> BenchReport:
    """FD per (sampler, N) config, all started from identical noise, plus pairwise FDs between configs."""
    model = as_loaded(ckpt_flow)
    if model.paradigm != "flow":
        raise ComparisonInvalidError("solver sensitivity needs a flow checkpoint")
    if matched not in ("nfe", "steps"):
        raise ConfigError("matched must be 'nfe' or 'steps'")
    configs = [(s, int(n)) for s, n in configs]
    for s, _ in configs:
        if s not in ("euler", "rk4"):
            raise ConfigError(f"solver sensitivity compares flow ODE solvers, got {s!r}")
    if matched == "nfe":
        flops = {energy_proxy(model.config, s, n)[1] for s, n in configs}
        if len(flops) != 1:
            raise ConfigError("NFE-matched mode needs every config to use the same number of evaluations")
    space = feature_space or pixel_space(model.sample_shape)
    outputs, rows = {}, []
    for s, n in configs:
        out = generate(model, s, n, count, seed)
        name = f"{s}/N={n}"
        outputs[name] = out.samples
        rows.append(Row(name, "fd", space.distance(out.samples, real), space.kind, nfe_of(s, n)))
        _save_grid(out.exported, grid_dir, f"{s}_N{n}")
    names = list(outputs)
    pairwise = {f"{a}|{b}": space.distance(outputs[a], outputs[b])
                for i, a in enumerate(names) for b in names[i + 1:]}
    kw = {"timestamp": timestamp} if timestamp else {}
    return BenchReport("solver", rows, seed,
                       extra={"count": count, "matched": matched, "pairwise_fd": pairwise}, **kw)


# latency -------------------------------------------------------------------------------------

@dataclass
class LatencyStats:
    sampler_id: str
    steps: int
    nfe: int
    batch: int
    reps: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    warning: Optional[str] = None

    @property
    def ms_per_nfe(self) -> float:
        return self.median_ms / self.nfe


def _timed_rounds(jobs: Sequence[tuple], batch: int, warmup: int, reps: int, seed: int) -> list:
    """Wall-clock ms per sample for each (model, sampler_id, steps) job.

    Repetitions are interleaved round-robin across jobs so slow drift of the
    machine affects every configuration alike. Single thread, GC paused.
    """
    if reps < 3:
        raise ConfigError("latency needs reps >= 3")
    threads = torch.get_num_threads()
    gc_was_enabled = gc.isenabled()
    torch.set_num_threads(1)
    times = [[] for _ in jobs]
    try:
        for model, sampler_id, steps in jobs:
            for i in range(warmup):
                generate(model, sampler_id, steps, batch, seed + i)
        gc.disable()
        for i in range(reps):
            for j, (model, sampler_id, steps) in enumerate(jobs):
                start = time.perf_counter()
                generate(model, sampler_id, steps, batch, seed + i)
                times[j].append((time.perf_counter() - start) * 1000.0 / batch)
    finally:
        if gc_was_enabled:
            gc.enable()
        torch.set_num_threads(threads)
    return [np.asarray(t) for t in times]


def _stats(sampler_id: str, steps: int, batch: int, times: np.ndarray) -> LatencyStats:
    median = float(np.median(times))
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1000.0
    warning = None
    if resolution_ms > 0.01 * median:
        warning = f"timer resolution {resolution_ms:.3g} ms exceeds 1% of the measured {median:.3g} ms"
    return LatencyStats(sampler_id, steps, nfe_of(sampler_id, steps), batch, len(times), median,
                        float(np.percentile(times, 10)), float(np.percentile(times, 90)), warning)


def measure_latency(ckpt, sampler_id: str, steps: int, batch: int = 1, warmup: int = 5,
                    reps: int = 50, seed: int = 0) -> LatencyStats:
    """Per-sample wall-clock latency of a full sampler call, single-threaded, warmup excluded."""
    model = as_loaded(ckpt)
    nfe_of(sampler_id, steps)
    (times,) = _timed_rounds([(model, sampler_id, steps)], batch, warmup, reps, seed)
    return _stats(sampler_id, steps, batch, times)


def latency_report(runs: Sequence[tuple], seed: int = 0, reps: int = 50, warmup: int = 5,
                   batch: int = 1, timestamp: Optional[str] = None) -> BenchReport:
    """``runs`` holds (label, ckpt, sampler_id, steps) tuples, timed in interleaved rounds."""
    jobs = [(as_loaded(ckpt), sampler_id, steps) for _, ckpt, sampler_id, steps in runs]
    for _, sampler_id, steps in jobs:
        nfe_of(sampler_id, steps)
    all_times = _timed_rounds(jobs, batch, warmup, reps, seed)
    rows, warnings = [], {}
    for (label, _, sampler_id, steps), times in zip(runs, all_times):
        st = _stats(sampler_id, steps, batch, times)
        name = f"{label}/{sampler_id}/N={steps}"
        rows += [Row(name, "median_ms", st.median_ms, "ms/sample", steps),
                 Row(name, "p10_ms", st.p10_ms, "ms/sample", steps),
                 Row(name, "p90_ms", st.p90_ms, "ms/sample", steps),
                 Row(name, "nfe", st.nfe, "evals", steps),
                 Row(name, "ms_per_nfe", st.ms_per_nfe, "ms", steps),
                 Row(name, "reps", st.reps, "", steps)]
        if st.warning:
            warnings[name] = st.warning
    kw = {"timestamp": timestamp} if timestamp else {}
    return BenchReport("latency", rows, seed, extra={"warnings": warnings, "batch": batch}, **kw)


def energy_proxy(config: bb.BackboneConfig, sampler_id: str, steps: int) -> tuple[int, int]:
    """(NFE, multiply-adds per sample); the latter is NFE times one forward's multiply-adds."""
    nfe = nfe_of(sampler_id, steps)
    return nfe, nfe * bb.flops_per_forward(config)
