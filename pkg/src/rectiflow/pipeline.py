"""Command implementations shared by the CLI and the one-shot reproduction."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import backbone as bb
from . import config as cfg
from .benchmark import (FrechetFeatureSpace, latency_report, nfe_matched_pairs, solver_sensitivity, step_ablation,
                        train_classifier_space)
from .data import find_mnist, load_mnist_idx, make_toy
from .errors import ConfigError
from .geometry import (curvature_stats, endpoint_noise, interpolation_smoothness, latent_interpolation,
                       project_field)
from .samplers import as_loaded, generate, save_trajectory
from .training import TrainConfig, train
from .viz import histogram_svg, quiver_svg, save_interpolation, save_samples

log = logging.getLogger(__name__)

PINNED_TIMESTAMP = "1970-01-01T00:00:00Z"
REAL_SEED_OFFSET = 1_000_001
SUBDIRS = ("ckpt", "samples", "reports", "figures")


@dataclass
class RunConfig:
    command: str
    settings: dict
    seed: int
    out_dir: Path

    @property
    def deterministic(self) -> bool:
        return bool(self.settings["deterministic"])

    @property
    def timestamp(self) -> Optional[str]:
        return PINNED_TIMESTAMP if self.deterministic else None

    def path(self, *parts) -> Path:
        p = self.out_dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def inside(self, sub: str, name: str) -> Path:
        """Place a user-named artifact under the run directory (only its base name is kept)."""
        return self.path(sub, Path(name).name)


def run_id(seed: int) -> str:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return f"{stamp}-{hashlib.sha1(str(seed).encode()).hexdigest()[:6]}"


def configure_threads(deterministic: bool) -> None:
    cap = os.environ.get("RECTIFLOW_THREADS")
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif cap is not None and cap.strip() != "":
        torch.set_num_threads(max(1, int(cap)))


def make_run(command: str, settings: dict) -> RunConfig:
    rid = settings["run_id"] or run_id(settings["seed"])
    out = Path(settings["out"]) / rid
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    run = RunConfig(command, settings, settings["seed"], out)
    (out / "run.json").write_text(json.dumps({"command": command, "settings": cfg.dump(settings)},
                                             indent=1, sort_keys=True))
    configure_threads(run.deterministic)
    return run


# data ---------------------------------------------------------------------------------------

def toy_params(settings) -> dict:
    name = settings["data.toy"]
    mean = list(settings["data.toy_mean"])
    if name == "single_gaussian":
        return {"mean": mean, "var": settings["data.toy_std"] ** 2}
    if name == "gaussian_ring":
        return {"radius": float(np.linalg.norm(mean)), "std": settings["data.toy_std"]}
    return {"mean": mean, "std": settings["data.toy_std"]}


def _mnist(settings):
    images_path, labels_path = find_mnist(settings["data.dir"])
    ds = load_mnist_idx(images_path, labels_path)
    real_n = min(settings["data.real_count"], len(ds) // 2)
    return ds, real_n


def load_data(settings) -> tuple[torch.Tensor, torch.Tensor]:
    """(training set, held-out real batch) for the configured data source.

    For MNIST the real batch is the last ``data.real_count`` images, never used for training.
    """
    if settings["data.dir"]:
        ds, real_n = _mnist(settings)
        train_ds = ds.images[:-real_n]
        if settings["data.subset"]:
            train_ds = train_ds[:settings["data.subset"]]
        return train_ds, ds.images[-real_n:]
    params = toy_params(settings)
    seed = settings["seed"]
    train_pts = make_toy(settings["data.toy"], settings["data.toy_count"], seed, params).points
    real = make_toy(settings["data.toy"], settings["data.real_count"], seed + REAL_SEED_OFFSET, params).points
    return train_pts, real


def backbone_config(settings, in_shape) -> bb.BackboneConfig:
    preset = settings["model.preset"]
    conf = bb.preset_config(preset, seed=settings["seed"])
    if tuple(conf.in_shape) != tuple(in_shape):
        raise ConfigError(f"preset {preset} expects inputs {tuple(conf.in_shape)}, data has {tuple(in_shape)}")
    return conf


def train_config(settings, in_shape, paradigm: Optional[str] = None) -> TrainConfig:
    paradigm = paradigm or settings["train.paradigm"]
    return TrainConfig(
        paradigm=paradigm, steps=settings["train.steps"], batch_size=settings["train.batch_size"],
        learning_rate=settings["train.lr"], seed=settings["seed"],
        backbone=backbone_config(settings, in_shape),
        schedule={"T": settings["schedule.T"], "beta_start": settings["schedule.beta_start"],
                  "beta_end": settings["schedule.beta_end"]} if paradigm == "diffusion" else None,
        log_every=settings["train.log_every"], clip_grad=settings["train.clip_grad"] or None)


# commands -------------------------------------------------------------------------------------

def cmd_train(run: RunConfig, paradigm: Optional[str] = None, ckpt_name: str = "") -> Path:
    s = run.settings
    data, _ = load_data(s)
    conf = train_config(s, data.shape[1:], paradigm)
    name = ckpt_name or conf.paradigm
    ckpt = train(conf, data, log_path=run.path("reports", f"loss_{name}.csv"),
                 deterministic=run.deterministic, record_wall=not run.deterministic)
    dest = run.path("ckpt", name)
    bb.save(ckpt, dest)
    log.info("saved %s checkpoint to %s", conf.paradigm, dest)
    return dest


def cmd_sample(run: RunConfig) -> Path:
    s = run.settings
    if not s["sample.ckpt"]:
        raise ConfigError("sample needs --ckpt")
    record = bool(s["sample.record_traj"])
    result = generate(s["sample.ckpt"], s["sample.sampler"], s["sample.steps"], s["sample.count"],
                      run.seed, record=record)
    out = run.path("samples", "samples.npy")
    np.save(out, result.samples.numpy())
    if record:
        save_trajectory(result.trajectory, run.inside("samples", s["sample.record_traj"]))
    if s["sample.grid"] and result.exported.shape[0]:
        save_samples(result.exported, run.inside("figures", s["sample.grid"]))
    return out


def cmd_curvature(run: RunConfig) -> dict:
    s = run.settings
    jobs = []
    if s["analyze.ckpt_flow"]:
        jobs.append(("flow", s["analyze.ckpt_flow"], s["analyze.flow_sampler"]))
    if s["analyze.ckpt_diff"]:
        jobs.append(("diffusion", s["analyze.ckpt_diff"], s["analyze.diff_sampler"]))
    if not jobs:
        raise ConfigError("analyze curvature needs --ckpt-flow and/or --ckpt-diff")
    summary, all_stats = {}, []
    with run.path("reports", "curvature.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "sampler", "index", "C", "E", "second_derivative"])
        for tag, ckpt, sampler in jobs:
            st = curvature_stats(ckpt, sampler, s["analyze.steps"], s["analyze.n"], run.seed)
            all_stats.append(st)
            summary[tag] = st.summary()
            second = st.second_derivs if len(st.second_derivs) else [float("nan")] * len(st.samples)
            for i, (c, e, d2) in enumerate(zip(st.samples, st.energies, second)):
                writer.writerow([tag, sampler, i, repr(float(c)), repr(float(e)), repr(float(d2))])
    run.path("reports", "curvature_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    histogram_svg(all_stats, run.path("figures", "curvature_hist.svg"))
    return summary


def cmd_field(run: RunConfig) -> dict:
    s = run.settings
    if not s["analyze.ckpt_flow"]:
        raise ConfigError("analyze field needs --ckpt-flow")
    model = as_loaded(s["analyze.ckpt_flow"])
    start = generate(model, "euler", s["analyze.steps"], 1, run.seed, record=True).trajectory
    proj = project_field(model, start.initial[0], start.final[0], s["analyze.grid_res"],
                         s["analyze.extent"], s["analyze.t_eval"], run.seed)
    result = {"t_eval": proj.t_eval, "chord_length": proj.end_coords[0],
              "mean_e1_along_chord": proj.mean_along_chord(),
              "grid": proj.grid.tolist(), "arrows": proj.arrows.tolist()}
    run.path("reports", "field.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    quiver_svg(proj, run.path("figures", "field_quiver.svg"))
    return result


def cmd_interp(run: RunConfig) -> dict:
    s = run.settings
    if not s["analyze.ckpt_flow"]:
        raise ConfigError("analyze interp needs --ckpt-flow")
    model = as_loaded(s["analyze.ckpt_flow"])
    z_a, z_b = endpoint_noise(run.seed, run.seed + 1, model.sample_shape)
    frames = latent_interpolation(model, z_a, z_b, s["analyze.K"], s["analyze.steps"], "euler", run.seed)
    diffs, ratio = interpolation_smoothness(frames)
    result = {"K": s["analyze.K"], "adjacent_mean_abs_diff": diffs.tolist(), "max_over_median": ratio}
    run.path("reports", "interp.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    save_interpolation(frames, run.path("figures", "interp.png"))
    return result


def _bench_ckpts(s, need_diff: bool):
    if not s["bench.ckpt_flow"]:
        raise ConfigError("bench needs --ckpt-flow")
    if need_diff and not s["bench.ckpt_diff"]:
        raise ConfigError("this benchmark needs --ckpt-diff")
    flow = as_loaded(s["bench.ckpt_flow"])
    diff = as_loaded(s["bench.ckpt_diff"]) if s["bench.ckpt_diff"] else None
    return flow, diff


def feature_space(settings) -> Optional[FrechetFeatureSpace]:
    """None selects raw pixels; ``classifier`` trains a small digit classifier on the MNIST training split."""
    kind = settings["bench.feature_space"]
    if kind == "pixel":
        return None
    if kind != "classifier":
        raise ConfigError(f"bench.feature_space must be pixel or classifier, got {kind!r}")
    if not settings["data.dir"]:
        raise ConfigError("the classifier feature space needs labelled MNIST data (--data-dir)")
    ds, real_n = _mnist(settings)
    if ds.labels is None:
        raise ConfigError("the classifier feature space needs the MNIST label file")
    return train_classifier_space(ds.images[:-real_n], ds.labels[:-real_n], settings["bench.classifier_steps"],
                                  seed=settings["seed"])


def cmd_bench(run: RunConfig, experiment: str):
    s = run.settings
    if experiment == "steps":
        flow, diff = _bench_ckpts(s, True)
        _, real = load_data(s)
        report = step_ablation(flow, diff, s["bench.steps_list"], s["bench.count"], run.seed, real,
                               feature_space=feature_space(s),
                               grid_dir=run.path("figures", "steps", "x").parent, timestamp=run.timestamp)
    elif experiment == "solver":
        flow, _ = _bench_ckpts(s, False)
        _, real = load_data(s)
        if s["bench.matched"] == "nfe":
            configs = nfe_matched_pairs(s["bench.solver_steps"])
        else:
            configs = [(solver, n) for n in s["bench.solver_steps"] for solver in ("euler", "rk4")]
        report = solver_sensitivity(flow, configs, s["bench.count"], run.seed, real, matched=s["bench.matched"],
                                    feature_space=feature_space(s),
                                    grid_dir=run.path("figures", "solver", "x").parent,
                                    timestamp=run.timestamp)
    elif experiment == "latency":
        flow, diff = _bench_ckpts(s, False)
        runs = [("flow", flow, "euler", n) for n in s["bench.latency_steps"]]
        runs += [("flow", flow, "rk4", n) for n in s["bench.latency_steps"]]
        if diff is not None:
            runs += [("diffusion", diff, "ancestral", n) for n in s["bench.latency_steps"]]
        report = latency_report(runs, seed=run.seed, reps=s["bench.reps"], warmup=s["bench.warmup"],
                                batch=s["bench.batch"], timestamp=run.timestamp)
    else:
        raise ConfigError(f"unknown benchmark {experiment!r}")
    report.write(run.path("reports", experiment, "report.json").parent)
    return report
