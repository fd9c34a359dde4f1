"""Flat typed key/value configuration: defaults < file < command-line flags.

File format, one setting per line::

    # comment
    train.steps = 5000
    data.toy_mean = 3.0, 0.0

Unknown keys are rejected.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _str(text) -> str:
    return str(text)


TYPES = {"int": int, "float": float, "bool": _bool, "str": _str, "ints": _ints, "floats": _floats}

# key -> (type name, default, help)
SCHEMA: dict[str, tuple[str, Any, str]] = {
    "seed": ("int", 0, "master seed"),
    "deterministic": ("bool", False, "serial execution and pinned report timestamps"),
    "out": ("str", "out", "root directory for run outputs"),
    "run_id": ("str", "", "run directory name (default: UTC timestamp + seed hash)"),
    "data.dir": ("str", "", "directory holding the MNIST IDX files"),
    "data.toy": ("str", "two_gaussians", "toy generator used when no data dir is given"),
    "data.toy_count": ("int", 20000, "number of toy training points"),
    "data.toy_mean": ("floats", (3.0, 0.0), "toy mode mean (mirrored for two_gaussians)"),
    "data.toy_std": ("float", 1.0, "toy mode standard deviation"),
    "data.subset": ("int", 0, "use only the first n MNIST images (0 = all)"),
    "data.real_count": ("int", 5000, "held-out real samples for Frechet distances"),
    "model.preset": ("str", "toy_mlp", "backbone preset"),
    "schedule.T": ("int", 1000, "diffusion steps"),
    "schedule.beta_start": ("float", 1e-4, "first beta"),
    "schedule.beta_end": ("float", 0.02, "last beta"),
    "train.paradigm": ("str", "flow", "diffusion or flow"),
    "train.steps": ("int", 5000, "optimizer steps"),
    "train.batch_size": ("int", 256, "batch size"),
    "train.lr": ("float", 2e-4, "Adam learning rate"),
    "train.log_every": ("int", 100, "loss log interval"),
    "train.clip_grad": ("float", 0.0, "gradient norm clip (0 = off)"),
    "sample.ckpt": ("str", "", "checkpoint directory"),
    "sample.sampler": ("str", "euler", "ancestral, ddim, euler or rk4"),
    "sample.steps": ("int", 10, "sampling steps"),
    "sample.count": ("int", 64, "number of samples"),
    "sample.record_traj": ("str", "", "trajectory output name"),
    "sample.grid": ("str", "", "sample grid PNG name"),
    "analyze.ckpt_flow": ("str", "", "flow checkpoint"),
    "analyze.ckpt_diff": ("str", "", "diffusion checkpoint"),
    "analyze.flow_sampler": ("str", "euler", "flow sampler for curvature"),
    "analyze.diff_sampler": ("str", "ddim", "diffusion sampler for curvature"),
    "analyze.steps": ("int", 50, "sampling steps"),
    "analyze.n": ("int", 100, "trajectories"),
    "analyze.grid_res": ("int", 21, "field lattice resolution"),
    "analyze.extent": ("float", 1.0, "field lattice half-width in chord lengths"),
    "analyze.t_eval": ("float", 0.5, "time at which the field is projected"),
    "analyze.K": ("int", 8, "intermediate interpolation frames"),
    "bench.ckpt_flow": ("str", "", "flow checkpoint"),
    "bench.ckpt_diff": ("str", "", "diffusion checkpoint"),
    "bench.steps_list": ("ints", (5, 10, 20, 50, 100), "step counts for the ablation"),
    "bench.solver_steps": ("ints", (16,), "Euler step counts for NFE-matched solver pairs"),
    "bench.matched": ("str", "nfe", "solver comparison mode: nfe or steps"),
    "bench.feature_space": ("str", "pixel", "Frechet feature space: pixel or classifier (needs MNIST labels)"),
    "bench.classifier_steps": ("int", 500, "training steps of the classifier feature extractor"),
    "bench.count": ("int", 5000, "samples per configuration"),
    "bench.reps": ("int", 50, "latency repetitions"),
    "bench.warmup": ("int", 5, "latency warmup runs"),
    "bench.batch": ("int", 1, "latency batch size"),
    "bench.latency_steps": ("ints", (10, 50), "step counts for latency"),
}


def defaults() -> dict:
    return {key: spec[1] for key, spec in SCHEMA.items()}


def coerce(key: str, value) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][0]
    try:
        return TYPES[kind](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key} ({kind}): {value!r}") from exc


def parse_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, value)
    return values


def read_file(path) -> dict:
    path = Path(path)
    try:
        return parse_text(path.read_text(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def resolve(*layers: Mapping) -> dict:
    """Merge layers left to right; later layers win. Every key is validated."""
    merged = defaults()
    for layer in layers:
        for key, value in layer.items():
            merged[key] = coerce(key, value)
    return merged


def dump(settings: Mapping) -> dict:
    """JSON-friendly copy (tuples become lists)."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(settings.items())}
