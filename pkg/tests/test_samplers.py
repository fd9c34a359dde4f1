import math

import numpy as np
import pytest
import torch

from rectiflow import backbone as bb
from rectiflow.errors import ConfigError, IntegrationFault, IntegrityError
from rectiflow.rng import draw_noise
from rectiflow.samplers import (LoadedModel, generate, integrate_euler, integrate_rk4, load_trajectory,
                                respaced_steps, sample_ancestral, sample_ddim, save_trajectory)
from rectiflow.schedules import linear_beta_schedule

X0 = torch.tensor([[1.0, -2.0]], dtype=torch.float64)


class Counting:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, x, t):
        self.calls += 1
        return self.fn(x, t)


def _stub(paradigm, fn, sched=None):
    return LoadedModel(Counting(fn), paradigm, bb.preset_config("toy_mlp"), sched)


@pytest.mark.parametrize("integrator", [integrate_euler, integrate_rk4])
@pytest.mark.parametrize("n", [1, 2, 3, 8, 10])
def test_constant_field_exact(integrator, n):
    c = torch.tensor([[0.5, 0.25]], dtype=torch.float64)
    out = integrator(lambda x, t: c.expand_as(x), X0, n).final
    if n & (n - 1) == 0:
        # dyadic step sizes add up without rounding
        assert torch.equal(out, X0 + c)
    else:
        assert torch.allclose(out, X0 + c, rtol=0, atol=1e-15)


def test_euler_exponential():
    assert torch.equal(integrate_euler(lambda x, t: x, X0, 1).final, 2 * X0)
    out = integrate_euler(lambda x, t: x, X0, 10).final
    assert torch.allclose(out, 1.1 ** 10 * X0, rtol=1e-14)
    assert (1.1 ** 10) == pytest.approx(2.59374, abs=1e-5)


def test_rk4_exponential():
    one = integrate_rk4(lambda x, t: x, X0, 1).final
    assert torch.max(torch.abs(one - 65 / 24 * X0)) < 1e-12
    ten = integrate_rk4(lambda x, t: x, X0, 10).final
    assert torch.max(torch.abs(ten - math.e * X0) / X0.abs()) < 3e-6


def test_order_of_convergence():
    exact = math.exp(-1.0)
    x0 = torch.ones(1, dtype=torch.float64)
    for integrator, order in ((integrate_euler, 2.0), (integrate_rk4, 16.0)):
        errs = [abs(integrator(lambda x, t: -x, x0, n, record=False).final.item() - exact) for n in (10, 20, 40)]
        for a, b in zip(errs, errs[1:]):
            assert abs(a / b - order) <= 0.3 * order


def test_time_dependent_field_uses_stage_times():
    # dx/dt = 3 t^2 has x(1) = x0 + 1; RK4 is exact for cubics in t
    out = integrate_rk4(lambda x, t: torch.full_like(x, 3 * t * t), X0, 2).final
    assert torch.allclose(out, X0 + 1, atol=1e-15)


def test_trajectory_invariants_and_stride():
    traj = integrate_rk4(lambda x, t: x, X0, 8)
    assert traj.states.shape[0] == len(traj.times) == 9
    assert all(a < b for a, b in zip(traj.times, traj.times[1:]))
    assert traj.nfe == 32 and traj.steps == 8
    assert torch.equal(traj.initial, X0)
    strided = integrate_rk4(lambda x, t: x, X0, 8, stride=3)
    assert strided.times == [0.0, 3 / 8, 6 / 8, 1.0]
    assert torch.equal(strided.final, traj.final)


def test_non_finite_state_raises():
    with pytest.raises(IntegrationFault):
        integrate_euler(lambda x, t: x * 1e300, X0, 5)


def test_respacing():
    assert respaced_steps(1000, 10).tolist() == [1000, 900, 800, 700, 600, 500, 400, 300, 200, 100]
    assert respaced_steps(4, 4).tolist() == [4, 3, 2, 1]
    with pytest.raises(ConfigError):
        respaced_steps(10, 11)


def test_ddim_zero_eps_hand_recursion():
    sched = linear_beta_schedule(4, 0.1, 0.4)
    xT = torch.tensor([[0.7, -0.2]], dtype=torch.float64)
    traj = sample_ddim(lambda x, t: torch.zeros_like(x), sched, 4, x_init=xT, dtype=torch.float64)
    ab = [1.0] + list(sched.alpha_bar)
    x = xT.clone()
    for k in (4, 3, 2, 1):
        x = math.sqrt(ab[k - 1] / ab[k]) * x
        assert torch.allclose(traj.states[5 - k], x, rtol=1e-14)
    assert torch.allclose(traj.final, xT / math.sqrt(sched.alpha_bar[-1]), rtol=1e-14)


def test_ddim_deterministic_in_initial_state():
    sched = linear_beta_schedule()
    fn = lambda x, t: 0.1 * x + t[:, None]  # noqa: E731
    xT = torch.randn(4, 2)
    a = sample_ddim(fn, sched, 20, x_init=xT, count=4)
    b = sample_ddim(fn, sched, 20, x_init=xT, count=4, seed=99)
    assert torch.equal(a.states, b.states)


def test_ancestral_tiny_beta_is_nearly_identity():
    sched = linear_beta_schedule(4, 1e-9, 1e-9)
    xT = torch.tensor([[0.3, -1.1]], dtype=torch.float64)
    traj = sample_ancestral(lambda x, t: torch.zeros_like(x), sched, 4, seed=0, x_init=xT, dtype=torch.float64)
    assert torch.max(torch.abs(traj.final - xT)) < 1e-3


def test_ancestral_full_chain_reproducible():
    sched = linear_beta_schedule()
    zero = lambda x, t: torch.zeros_like(x)  # noqa: E731
    a = sample_ancestral(zero, sched, sched.T, seed=3, count=2, record=False)
    b = sample_ancestral(zero, sched, sched.T, seed=3, count=2, record=False)
    c = sample_ancestral(zero, sched, sched.T, seed=4, count=2, record=False)
    assert torch.equal(a.final, b.final) and not torch.equal(a.final, c.final)


def test_ancestral_last_step_is_noise_free():
    sched = linear_beta_schedule(2, 0.1, 0.2)
    zero = lambda x, t: torch.zeros_like(x)  # noqa: E731
    xT = torch.ones(1, 2, dtype=torch.float64)
    traj = sample_ancestral(zero, sched, 2, seed=0, x_init=xT, dtype=torch.float64)
    # the final update from k=1 only rescales by 1/sqrt(1 - beta_1)
    assert torch.allclose(traj.final, traj.states[1] / math.sqrt(1 - 0.1), rtol=1e-14)


def test_per_sample_streams_independent_of_batch():
    sched = linear_beta_schedule()
    model = _stub("diffusion", lambda x, t: 0.5 * x, sched)
    four = generate(model, "ancestral", 10, 4, seed=8).samples
    two = generate(model, "ancestral", 10, 2, seed=8).samples
    assert torch.equal(four[:2], two)


@pytest.mark.parametrize("sampler,paradigm,nfe", [("euler", "flow", 12), ("rk4", "flow", 48),
                                                  ("ancestral", "diffusion", 12), ("ddim", "diffusion", 12)])
def test_nfe_counts_actual_calls(sampler, paradigm, nfe):
    model = _stub(paradigm, lambda x, t: -0.1 * x, linear_beta_schedule() if paradigm == "diffusion" else None)
    out = generate(model, sampler, 12, 3, seed=0, record=True)
    assert model.net.calls == nfe == out.trajectory.nfe


def test_generate_edge_cases():
    model = _stub("flow", lambda x, t: -x)
    empty = generate(model, "euler", 10, 0, seed=0)
    assert empty.samples.shape == (0, 2) and model.net.calls == 0
    with pytest.raises(ConfigError):
        generate(model, "ddim", 10, 2, seed=0)
    with pytest.raises(ConfigError):
        generate(model, "heun", 10, 2, seed=0)


def test_generate_starts_from_seeded_noise_and_records_endpoint():
    model = _stub("flow", lambda x, t: torch.zeros_like(x))
    out = generate(model, "euler", 5, 3, seed=21, record=True)
    assert torch.equal(out.samples, draw_noise(21, 3, (2,)))
    assert torch.equal(out.trajectory.final, out.samples)
    again = generate(model, "euler", 5, 3, seed=21)
    assert torch.equal(again.samples, out.samples)


def test_trajectory_file_round_trip(tmp_path):
    traj = integrate_rk4(lambda x, t: -x, torch.randn(3, 2), 6)
    save_trajectory(traj, tmp_path / "t.traj")
    back = load_trajectory(tmp_path / "t.traj")
    assert torch.equal(back.states, traj.states) and back.times == traj.times
    assert back.nfe == 24 and back.sampler_id == "rk4"
    blob = tmp_path / "t.traj" / "states.bin"
    blob.write_bytes(blob.read_bytes()[:-1])
    with pytest.raises(IntegrityError):
        load_trajectory(tmp_path / "t.traj")


def test_trajectory_paths_layout():
    traj = integrate_euler(lambda x, t: torch.ones_like(x), torch.zeros(2, 3), 4)
    paths = traj.paths()
    assert paths.shape == (2, 5, 3)
    assert np.array_equal(traj.path(1), paths[1])
