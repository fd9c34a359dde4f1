"""One-shot desk-scale reproduction: train both paradigms, analyze, benchmark, summarize."""
from __future__ import annotations

import json
import logging
import shutil
import time
from pathlib import Path
from typing import Optional

from . import config as cfg
from . import criteria as crit
from . import pipeline
from .benchmark import latency_report
from .errors import RectiflowError
from .geometry import curvature_stats
from .samplers import as_loaded

log = logging.getLogger(__name__)

LATENCY_RUNS = (("flow", "euler", 10), ("flow", "euler", 50), ("flow", "rk4", 10), ("flow", "rk4", 50),
                ("diffusion", "ancestral", 10), ("diffusion", "ancestral", 50))
DETERMINISM_STEPS = 200


def profile_settings(config_dir, profile: str, out, steps: Optional[int] = None, run_id: str = "") -> dict:
    path = Path(config_dir) / f"{profile}.cfg"
    layer = {"out": str(out), "run_id": run_id or profile, "deterministic": True}
    if steps is not None:
        layer["train.steps"] = steps
    return cfg.resolve(cfg.read_file(path), layer)


def train_pair(run: pipeline.RunConfig) -> tuple[Path, Path]:
    return pipeline.cmd_train(run, "flow"), pipeline.cmd_train(run, "diffusion")


def analyses(run: pipeline.RunConfig, flow_ckpt: Path, diff_ckpt: Path) -> dict:
    """Curvature, step ablation and solver sensitivity; everything here is deterministic."""
    s = run.settings
    s.update({"analyze.ckpt_flow": str(flow_ckpt), "analyze.ckpt_diff": str(diff_ckpt),
              "bench.ckpt_flow": str(flow_ckpt), "bench.ckpt_diff": str(diff_ckpt)})
    pipeline.cmd_curvature(run)
    flow_st = curvature_stats(flow_ckpt, s["analyze.flow_sampler"], s["analyze.steps"], s["analyze.n"], run.seed)
    diff_st = curvature_stats(diff_ckpt, s["analyze.diff_sampler"], s["analyze.steps"], s["analyze.n"], run.seed)
    ancestral = curvature_stats(diff_ckpt, "ancestral", s["analyze.steps"], s["analyze.n"], run.seed)
    run.path("reports", "curvature_ancestral.json").write_text(
        json.dumps(ancestral.summary(), indent=1, sort_keys=True))
    steps_report = pipeline.cmd_bench(run, "steps")
    solver_report = pipeline.cmd_bench(run, "solver")
    return {"flow": flow_st, "diffusion": diff_st, "ancestral": ancestral,
            "steps": steps_report, "solver": solver_report}


def latency(run: pipeline.RunConfig, flow_ckpt: Path, diff_ckpt: Path):
    models = {"flow": as_loaded(flow_ckpt), "diffusion": as_loaded(diff_ckpt)}
    s = run.settings
    runs = [(tag, models[tag], sampler, n) for tag, sampler, n in LATENCY_RUNS]
    report = latency_report(runs, seed=run.seed, reps=s["bench.reps"], warmup=s["bench.warmup"],
                            batch=s["bench.batch"], timestamp=run.timestamp)
    report.write(run.path("reports", "latency", "report.json").parent)
    return report


def determinism_pair(settings: dict, root: Path) -> tuple[Path, Path]:
    """Run a short train + analysis twice into two run directories."""
    dirs = []
    for tag in ("a", "b"):
        s = dict(settings, **{"run_id": f"determinism_{tag}", "out": str(root), "train.steps": DETERMINISM_STEPS,
                              "bench.count": min(settings["bench.count"], 1000)})
        run = pipeline.make_run("reproduce determinism", s)
        flow, diff = train_pair(run)
        analyses(run, flow, diff)
        dirs.append(run.out_dir)
    return dirs[0], dirs[1]


def run_profile(config_dir, profile: str, out, steps: Optional[int] = None) -> list:
    settings = profile_settings(config_dir, profile, out, steps)
    run = pipeline.make_run(f"reproduce {profile}", settings)
    started = time.perf_counter()
    flow_ckpt, diff_ckpt = train_pair(run)
    res = analyses(run, flow_ckpt, diff_ckpt)
    outcomes = []
    if profile == "mnist":
        c6 = crit.check_curvature(res["flow"], res["diffusion"], number=12)
        grids = sorted(p.name for p in run.path("figures", "steps", "x").parent.glob("*.png"))
        c6.detail += f"; grids: {', '.join(grids)}"
        outcomes.append(c6)
    else:
        outcomes += [crit.check_curvature(res["flow"], res["diffusion"]), crit.check_frontier(res["steps"]),
                     crit.check_solver(res["solver"]), crit.check_latency(latency(run, flow_ckpt, diff_ckpt))]
        a, b = determinism_pair(settings, Path(out) / f"{profile}_determinism")
        outcomes.append(crit.check_determinism(a, b))
    log.info("%s profile finished in %.1f s", profile, time.perf_counter() - started)
    return outcomes


def write_summary(outcomes: list, path: Path, notes: str = "") -> Path:
    lines = ["# Reproduction summary", ""]
    lines += [f"- {o.line()}" for o in sorted(outcomes, key=lambda o: o.number)]
    if notes:
        lines += ["", notes]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def reproduce_all(config_dir, out="out", profile: str = "toy", steps: Optional[int] = None) -> int:
    """Exit code 0 when every stage ran (criteria may still fail; see summary.md), else 1."""
    out = Path(out)
    outcomes = [crit.check_schedule(), crit.check_forward_stats(), crit.check_gradients(),
                crit.check_integrators(), crit.check_straightness(), crit.check_frechet()]
    status = 0
    profiles = ("toy", "mnist") if profile == "all" else (profile,)
    for name in profiles:
        if name == "mnist":
            settings = profile_settings(config_dir, "mnist", out, steps)
            if not settings["data.dir"] or not Path(settings["data.dir"]).is_dir():
                outcomes.append(crit.skipped(12, f"no MNIST data directory ({settings['data.dir'] or 'unset'})"))
                continue
        try:
            outcomes += run_profile(config_dir, name, out, steps)
        except (RectiflowError, OSError, RuntimeError, ValueError) as exc:
            log.error("%s profile failed: %s", name, exc)
            print(f"error in {name} profile: {type(exc).__name__}: {exc}")
            status = 1
    numbers = {o.number for o in outcomes}
    if 12 not in numbers:
        outcomes.append(crit.skipped(12, "MNIST profile not requested"))
    for n in crit.TITLES:
        if n not in {o.number for o in outcomes}:
            outcomes.append(crit.skipped(n, "stage did not complete"))
    summary = write_summary(outcomes, out / "summary.md")
    print(summary.read_text(), end="")
    return status


def clean(out) -> None:
    shutil.rmtree(out, ignore_errors=True)
