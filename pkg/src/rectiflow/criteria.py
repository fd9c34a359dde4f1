"""Acceptance checks shared by the reproduction summary and the test suite.

Closed-form checks (1-5, 10) compute everything themselves. The experimental
checks (6-9, 11) take measured artifacts and only apply the thresholds.
"""
from __future__ import annotations

import filecmp
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .benchmark import BenchReport, frechet_distance, nfe_of
from .geometry import CurvatureStats, pooled_gap, straightness_ratio
from .rng import philox
from .samplers import integrate_euler, integrate_rk4
from .schedules import diffusion_forward, linear_beta_schedule
from .training import grad_check

PASS, FAIL, SKIP = "PASS", "FAIL", "SKIP"

TITLES = {
    1: "schedule oracle",
    2: "forward-process statistics",
    3: "gradient check",
    4: "integrator order",
    5: "straightness oracle",
    6: "curvature ordering",
    7: "efficiency frontier",
    8: "solver sufficiency",
    9: "latency scaling",
    10: "Frechet distance oracle",
    11: "determinism",
    12: "MNIST-subset smoke run",
}


@dataclass
class Outcome:
    number: int
    status: str
    detail: str
    values: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def line(self) -> str:
        return f"[{self.status}] {self.number}. {TITLES[self.number]}: {self.detail}"


def _status(ok: bool) -> str:
    return PASS if ok else FAIL


# closed-form checks --------------------------------------------------------------------

def check_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> Outcome:
    sched = linear_beta_schedule(T, beta_start, beta_end)
    prod = 1.0
    for i in range(T):
        prod *= 1.0 - (beta_start + (beta_end - beta_start) * i / (T - 1))
    rel = abs(sched.alpha_bar[-1] - prod) / prod
    return Outcome(1, _status(rel <= 1e-10), f"alpha_bar_T={sched.alpha_bar[-1]:.6e}, rel err {rel:.2e} (<= 1e-10)",
                   {"rel_err": rel})


def check_forward_stats(draws: int = 100_000, seed: int = 0, n_times: int = 5) -> Outcome:
    sched = linear_beta_schedule()
    gen = philox(seed, 2)
    ks = gen.integers(1, sched.T + 1, n_times)
    x0_val = 0.8
    worst = 0.0
    for k in ks:
        eps = torch.from_numpy(gen.standard_normal(draws))
        x0 = torch.full((draws,), x0_val, dtype=torch.float64)
        xt = diffusion_forward(x0, int(k), eps, sched).numpy()
        ab = sched.alpha_bar[k - 1]
        var = 1.0 - ab
        z_mean = abs(xt.mean() - math.sqrt(ab) * x0_val) / math.sqrt(var / draws)
        z_var = abs(xt.var(ddof=1) - var) / (var * math.sqrt(2.0 / (draws - 1)))
        worst = max(worst, z_mean, z_var)
    return Outcome(2, _status(worst <= 4.0), f"k={list(map(int, ks))}, worst deviation {worst:.2f} SE (<= 4)",
                   {"worst_se": worst})


def check_gradients(seed: int = 0) -> Outcome:
    errs = {kind: grad_check(loss_kind=kind, seed=seed) for kind in ("flow", "diffusion")}
    worst = max(errs.values())
    return Outcome(3, _status(worst < 1e-4),
                   f"max rel err flow {errs['flow']:.2e}, diffusion {errs['diffusion']:.2e} (< 1e-4)", errs)


def check_integrators() -> Outcome:
    x0 = torch.ones(1, dtype=torch.float64)
    exact = math.exp(-1.0)
    decay = lambda x, t: -x  # noqa: E731
    err = {name: [abs(float(f(decay, x0, n, record=False).final[0]) - exact) for n in (10, 20, 40)]
           for name, f in (("euler", integrate_euler), ("rk4", integrate_rk4))}
    e_ratios = [err["euler"][i] / err["euler"][i + 1] for i in range(2)]
    r_ratios = [err["rk4"][i] / err["rk4"][i + 1] for i in range(2)]
    one = float(integrate_rk4(lambda x, t: x, x0, 1, record=False).final[0])
    ok = (all(abs(r - 2) <= 0.6 for r in e_ratios) and all(abs(r - 16) <= 4.8 for r in r_ratios)
          and abs(one - 65 / 24) <= 1e-12)
    detail = (f"euler ratios {e_ratios[0]:.3f},{e_ratios[1]:.3f} (2+-30%), rk4 ratios "
              f"{r_ratios[0]:.2f},{r_ratios[1]:.2f} (16+-30%), rk4 N=1 err {abs(one - 65 / 24):.1e}")
    return Outcome(4, _status(ok), detail, {"euler": e_ratios, "rk4": r_ratios})


def _random_isometry(gen, d):
    q, r = np.linalg.qr(gen.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    return q, gen.normal(0, 10, d)


def check_straightness(cases: int = 1000, seed: int = 0) -> Outcome:
    line = np.outer(np.linspace(0, 1, 7), [1.0, 2.0, -1.0])
    c_line = straightness_ratio(line)
    corner = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    c_corner = straightness_ratio(corner)
    gen = philox(seed, 5)
    worst = 0.0
    for _ in range(cases):
        d = int(gen.integers(2, 6))
        path = np.cumsum(gen.standard_normal((int(gen.integers(3, 12)), d)), axis=0)
        q, b = _random_isometry(gen, d)
        base = straightness_ratio(path)
        worst = max(worst, abs(straightness_ratio(path @ q.T + b) - base) / base)
    ok = abs(c_line - 1) <= 1e-12 and abs(c_corner - math.sqrt(2)) <= 1e-12 and worst <= 1e-9
    return Outcome(5, _status(ok), f"collinear {c_line:.15f}, right angle err {abs(c_corner - math.sqrt(2)):.1e}, "
                   f"isometry rel change {worst:.1e} over {cases} cases", {"isometry": worst})


def check_frechet(n: int = 100_000, seed: int = 0, tol: float = 0.05) -> Outcome:
    gen = philox(seed, 6)
    a = gen.standard_normal((2000, 8))
    same = frechet_distance(a, a.copy())
    x = gen.normal(0.0, 1.0, (n, 1))
    y = gen.normal(1.0, 2.0, (n, 1))
    fd = frechet_distance(x, y)
    ok = same <= 1e-6 and abs(fd - 2.0) <= tol
    return Outcome(10, _status(ok), f"identical sets {same:.1e} (<= 1e-6), 1-D FD {fd:.4f} vs 2 (+-{tol})",
                   {"identical": same, "fd_1d": fd})


# measured checks ------------------------------------------------------------------------

def check_curvature(flow: CurvatureStats, diff: CurvatureStats, number: int = 6) -> Outcome:
    gap = pooled_gap(flow, diff)
    parts = {"flow < 1.15": flow.mean < 1.15, "diffusion > 1.3": diff.mean > 1.3, "gap >= 3 SE": gap >= 3.0}
    failed = [k for k, v in parts.items() if not v]
    detail = (f"C_flow({flow.sampler_id},N={flow.steps})={flow.mean:.4f}, C_diff({diff.sampler_id},N={diff.steps})="
              f"{diff.mean:.4f}, gap {gap:.2f} SE" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return Outcome(number, _status(not failed), detail,
                   {"flow_mean": flow.mean, "diff_mean": diff.mean, "gap_se": gap})


def check_frontier(report: BenchReport) -> Outcome:
    fl10, fl100 = report.value("flow/euler/N=10", "fd"), report.value("flow/euler/N=100", "fd")
    df10, df100 = report.value("diffusion/ancestral/N=10", "fd"), report.value("diffusion/ancestral/N=100", "fd")
    r_flow, r_diff = fl10 / fl100, df10 / df100
    ok = r_flow <= 2.0 and r_diff >= 3.0
    return Outcome(7, _status(ok), f"flow FD(10)/FD(100) = {fl10:.4f}/{fl100:.4f} = {r_flow:.2f} (<= 2); "
                   f"diffusion = {df10:.4f}/{df100:.4f} = {r_diff:.2f} (>= 3)",
                   {"flow_ratio": r_flow, "diff_ratio": r_diff})


def check_solver(report: BenchReport) -> Outcome:
    rk, eu = report.value("rk4/N=4", "fd"), report.value("euler/N=16", "fd")
    diff = abs(rk - eu)
    return Outcome(8, _status(diff <= 0.25 * eu), f"|FD_rk4(4) - FD_euler(16)| = |{rk:.4f} - {eu:.4f}| = {diff:.4f} "
                   f"(<= {0.25 * eu:.4f})", {"abs_diff": diff, "limit": 0.25 * eu})


def check_latency(report: BenchReport, low: int = 10, high: int = 50) -> Outcome:
    med = {}
    for row in report.rows:
        if row.metric == "median_ms":
            _, sampler, n = row.config.split("/")
            med[(sampler, int(n.split("=")[1]))] = row.value
    scaling = {s: med[(s, high)] / med[(s, low)] for s, n in med if n == low and (s, high) in med}
    solver = {n: med[("rk4", n)] / med[("euler", n)] for s, n in med if s == "rk4" and ("euler", n) in med}
    nfe_ratio = nfe_of("ancestral", 100) / nfe_of("euler", 10)
    ok = (bool(scaling) and bool(solver) and all(abs(r - 5) <= 1.0 for r in scaling.values())
          and all(abs(r - 4) <= 1.0 for r in solver.values()) and nfe_ratio == 10)
    detail = ("N=50/N=10: " + ", ".join(f"{s} {r:.2f}" for s, r in sorted(scaling.items())) + " (5+-20%); rk4/euler: "
              + ", ".join(f"N={n} {r:.2f}" for n, r in sorted(solver.items())) + f" (4+-25%); NFE ratio {nfe_ratio:g}")
    return Outcome(9, _status(ok), detail, {"scaling": scaling, "solver": solver, "nfe_ratio": nfe_ratio})


def compare_trees(a: Path, b: Path, suffixes=(".csv", ".json")) -> list:
    """Relative paths of report files that differ (or exist on one side only)."""
    a, b = Path(a), Path(b)
    names = {p.relative_to(a) for p in a.rglob("*") if p.suffix in suffixes}
    names |= {p.relative_to(b) for p in b.rglob("*") if p.suffix in suffixes}
    diffs = []
    for rel in sorted(names):
        pa, pb = a / rel, b / rel
        if not (pa.is_file() and pb.is_file() and filecmp.cmp(pa, pb, shallow=False)):
            diffs.append(str(rel))
    return diffs


def check_determinism(a: Path, b: Path, ignore=("run.json",)) -> Outcome:
    diffs = [d for d in compare_trees(a, b) if Path(d).name not in ignore and "latency" not in d]
    count = sum(1 for p in Path(a).rglob("*") if p.suffix in (".csv", ".json") and p.name not in ignore)
    detail = f"{count} report files compared byte for byte" + (f"; differing: {diffs}" if diffs else "")
    return Outcome(11, _status(not diffs and count > 0), detail, {"differing": diffs})


def skipped(number: int, reason: str) -> Outcome:
    return Outcome(number, SKIP, reason)
