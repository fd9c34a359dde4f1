import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from rectiflow.errors import ConfigError, DomainError, ShapeError
from rectiflow.schedules import (diffusion_forward, fm_interpolate, fm_target_velocity, linear_beta_schedule,
                                 step_to_time)


@pytest.fixture(scope="module")
def sched():
    return linear_beta_schedule()


def test_single_step_schedule():
    s = linear_beta_schedule(1, 0.5, 0.5)
    assert s.alpha_bar.tolist() == [0.5]


@pytest.mark.parametrize("bs,be", [(0.0, 0.0), (0.1, 0.05), (0.5, 1.0), (-1e-3, 0.02)])
def test_bad_beta_ranges(bs, be):
    with pytest.raises(ConfigError):
        linear_beta_schedule(10, bs, be)


def test_alpha_bar_against_log_sum(sched):
    # independent oracle: compensated sum of logs in 64-bit
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    logs = [math.log1p(-b) for b in betas]
    for k in (1, 10, 500, 1000):
        expected = math.exp(math.fsum(logs[:k]))
        assert abs(sched.alpha_bar[k - 1] - expected) / expected < 1e-12
    assert sched.alpha_bar[-1] == pytest.approx(4.0358e-5, rel=1e-4)


def test_schedule_invariants(sched):
    assert np.all((sched.beta > 0) & (sched.beta < 1))
    assert np.all(np.diff(sched.beta) >= 0)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert sched.alpha_bar[0] == sched.alpha[0]
    direct = np.cumprod(sched.alpha)
    assert np.max(np.abs(direct - sched.alpha_bar) / direct) < 1e-12
    assert sched.alpha_bar_at(0) == 1.0
    with pytest.raises(ValueError):
        sched.beta[0] = 0.5


def test_time_convention():
    assert step_to_time(1, 1000) == 1 / 1000
    assert step_to_time(1000, 1000) == 1.0
    ts = [step_to_time(k, 50) for k in range(1, 51)]
    assert all(a < b for a, b in zip(ts, ts[1:]))


def test_forward_zero_noise_and_zero_signal(sched):
    x0 = torch.randn(3, 4, dtype=torch.float64)
    k = 250
    ab = sched.alpha_bar[k - 1]
    assert torch.equal(diffusion_forward(x0, k, torch.zeros_like(x0), sched), math.sqrt(ab) * x0)
    eps = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(diffusion_forward(torch.zeros_like(eps), k, eps, sched), math.sqrt(1 - ab) * eps)


def test_forward_per_sample_steps(sched):
    x0, eps = torch.ones(3, 2, dtype=torch.float64), torch.zeros(3, 2, dtype=torch.float64)
    out = diffusion_forward(x0, np.array([1, 500, 1000]), eps, sched)
    assert torch.allclose(out[:, 0], torch.tensor(np.sqrt(sched.alpha_bar[[0, 499, 999]])))


def test_forward_rejects_bad_input(sched):
    with pytest.raises(ShapeError):
        diffusion_forward(torch.zeros(2, 2), 5, torch.zeros(2, 3), sched)
    with pytest.raises(DomainError):
        diffusion_forward(torch.zeros(2, 2), 0, torch.zeros(2, 2), sched)
    with pytest.raises(DomainError):
        diffusion_forward(torch.zeros(2, 2), 1001, torch.zeros(2, 2), sched)


@pytest.mark.parametrize("k", [3, 137, 800])
def test_forward_monte_carlo(sched, k):
    n = 100_000
    gen = np.random.default_rng(k)
    x0 = torch.full((n, 2), 0.6, dtype=torch.float64)
    x0[:, 1] = -1.0
    eps = torch.from_numpy(gen.standard_normal((n, 2)))
    xt = diffusion_forward(x0, k, eps, sched).numpy()
    ab = sched.alpha_bar[k - 1]
    var = 1 - ab
    mean_se = math.sqrt(var / n)
    var_se = var * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(xt.mean(0) - math.sqrt(ab) * np.array([0.6, -1.0])) < 4 * mean_se)
    assert np.all(np.abs(xt.var(0, ddof=1) - var) < 4 * var_se)


def test_forward_bit_reproducible(sched):
    x0, eps = torch.randn(4, 3), torch.randn(4, 3)
    assert torch.equal(diffusion_forward(x0, 77, eps, sched), diffusion_forward(x0, 77, eps, sched))


def test_interpolate_cases():
    x0, x1 = torch.tensor([[0.0, 0.0]]), torch.tensor([[4.0, 8.0]])
    assert torch.equal(fm_interpolate(x0, x1, 0.25), torch.tensor([[1.0, 2.0]]))
    assert torch.equal(fm_interpolate(x0, x1, 0.0), x0)
    assert torch.equal(fm_interpolate(x0, x1, 1.0), x1)
    c = torch.full((2, 3), 1.7)
    for t in (0.0, 0.3, 0.9, 1.0):
        assert torch.equal(fm_interpolate(c, c, t), c)
    with pytest.raises(DomainError):
        fm_interpolate(x0, x1, 1.5)
    with pytest.raises(DomainError):
        fm_interpolate(x0, x1, torch.tensor([-0.1]))


def test_per_sample_interpolation_times():
    x0 = torch.zeros(3, 2)
    x1 = torch.ones(3, 2)
    out = fm_interpolate(x0, x1, torch.tensor([0.0, 0.5, 1.0]))
    assert torch.equal(out[:, 0], torch.tensor([0.0, 0.5, 1.0]))


def test_target_velocity():
    assert torch.equal(fm_target_velocity(torch.tensor([1.0, 1.0]), torch.tensor([3.0, 0.0])),
                       torch.tensor([2.0, -1.0]))
    x = torch.randn(5, 2)
    assert torch.equal(fm_target_velocity(x, x), torch.zeros_like(x))


def test_velocity_is_time_derivative():
    x0 = torch.randn(4, 3, dtype=torch.float64)
    x1 = torch.randn(4, 3, dtype=torch.float64)
    h = 1e-5
    fd = (fm_interpolate(x0, x1, 0.5 + h) - fm_interpolate(x0, x1, 0.5 - h)) / (2 * h)
    assert torch.max(torch.abs(fd - fm_target_velocity(x0, x1))) < 1e-6


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0, 1), seed=st.integers(0, 1000))
def test_interpolant_additivity(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 2, generator=g, dtype=torch.float64)
    x1 = torch.randn(3, 2, generator=g, dtype=torch.float64)
    lhs = fm_interpolate(x0, x1, t) - x0
    rhs = t * fm_target_velocity(x0, x1)
    assert torch.allclose(lhs, rhs, atol=1e-12, rtol=0)
