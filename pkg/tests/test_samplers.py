import numpy as np
import pytest

from edm2d import samplers
from edm2d.datasets import single_gaussian
from edm2d.rngstreams import stream
from edm2d.schedules import NoiseSchedule, sigma_grid


def zero_score(x, sigma):
    return np.zeros_like(x)


def gaussian_score(x, sigma):
    return -np.asarray(x) / (1.0 + sigma * sigma)


def test_euler_zero_score_zero_lambda():
    x = np.array([[1.0, 2.0]])
    out, rec = samplers.euler_step(zero_score, x, 1.0, 0.5, 0.0, np.zeros((1, 2)))
    np.testing.assert_array_equal(out, x)
    assert rec.stdev == 0.0


def test_euler_lambda_zero_is_ode_drift():
    x = np.array([[1.0, 0.0]])
    s_i, s_n = 1.0, 0.5
    delta = s_i ** 2 - s_n ** 2
    out, _ = samplers.euler_step(gaussian_score, x, s_i, s_n, 0.0,
                                 np.ones((1, 2)))  # noise must be ignored
    expected = x + delta * 0.5 * gaussian_score(x, s_i)
    np.testing.assert_allclose(out, expected, rtol=1e-15)


def test_euler_ordering_check():
    with pytest.raises(ValueError):
        samplers.euler_step(zero_score, np.zeros((1, 2)), 0.5, 1.0, 0.0,
                            np.zeros((1, 2)))


def test_euler_terminal_variance_matches_data():
    # analytic Gaussian score, lambda = 1, default grid: terminal variance
    # within 5% of 1 + sigma_min^2
    sched = NoiseSchedule()
    plan = samplers.StepPlan(sigmas=sigma_grid(sched), lam=1.0, solver="euler_sde")
    out = samplers.generate(gaussian_score, sched, 100_000, seed=41, plan=plan)
    target = 1.0 + sched.sigma_min ** 2
    assert np.abs(out.var(axis=0) - target).max() < 0.05 * target
    assert np.abs(out.mean(axis=0)).max() < 0.02


def test_heun_zero_score_identity():
    x = np.array([[0.3, -0.7]])
    np.testing.assert_array_equal(samplers.heun_step(zero_score, x, 1.0, 0.5), x)


def test_heun_matches_analytic_linear_flow():
    # Gaussian score: dx/dsigma = sigma x/(1+sigma^2), flow x * sqrt((1+s1^2)/(1+s0^2))
    sched = NoiseSchedule()
    grid = sigma_grid(sched)
    x = np.array([[2.0, -1.0], [0.5, 0.25]])
    cur = x.copy()
    for i in range(1, len(grid)):
        cur = samplers.heun_step(gaussian_score, cur, float(grid[i - 1]), float(grid[i]))
    exact = x * np.sqrt((1 + grid[-1] ** 2) / (1 + grid[0] ** 2))
    assert np.abs(cur - exact).max() <= 1e-3


def test_heun_final_step_single_evaluation():
    calls = []

    def counting_score(x, sigma):
        calls.append(sigma)
        return gaussian_score(x, sigma)

    samplers.heun_step(counting_score, np.ones((1, 2)), 0.5, 0.0)
    assert calls == [0.5]


def test_heun_marginal_preservation():
    sched = NoiseSchedule()
    out = samplers.generate(gaussian_score, sched, 100_000, seed=42)
    assert np.abs(out.var(axis=0) - 1.0).max() < 0.05
    assert np.abs(out.mean(axis=0)).max() < 0.02


def test_transition_log_density_at_mean():
    rec = samplers.TransitionRecord(mean=np.zeros(2), stdev=1.0)
    assert abs(rec.log_density_at(np.zeros(2)) - (-np.log(2 * np.pi))) < 1e-14


def test_transition_log_density_shift():
    rec = samplers.TransitionRecord(mean=np.zeros(2), stdev=0.7)
    base = rec.log_density_at(np.zeros(2))
    shifted = rec.log_density_at(np.array([0.7, 0.0]))
    assert abs((base - shifted) - 0.5) < 1e-14


def test_transition_log_density_integrates_to_one():
    rec = samplers.TransitionRecord(mean=np.array([0.3]), stdev=0.5)
    xs = np.linspace(-4, 4, 20001)[:, None]
    dens = np.exp(rec.log_density_at(xs))
    assert abs(np.trapezoid(dens, xs[:, 0]) - 1.0) < 1e-4


def test_transition_log_density_maximized_at_mean():
    rec = samplers.TransitionRecord(mean=np.array([0.5, -0.5]), stdev=0.3)
    xs = np.linspace(-2, 2, 41)
    grid = np.array([[a, b] for a in xs for b in xs])
    vals = rec.log_density_at(grid)
    best = grid[np.argmax(vals)]
    np.testing.assert_allclose(best, [0.5, -0.5], atol=0.06)


def test_transition_density_deterministic_step_invalid():
    rec = samplers.TransitionRecord(mean=np.zeros(2), stdev=0.0)
    with pytest.raises(ValueError):
        rec.log_density_at(np.zeros(2))


def test_sample_prior_covariance():
    sched = NoiseSchedule(sigma_max=4.0)
    xs = samplers.sample_prior(sched, 100_000, stream(43, "prior"))
    assert np.abs(np.cov(xs.T) - 16 * np.eye(2)).max() < 0.05 * 16


def test_sample_prior_reproducible():
    sched = NoiseSchedule()
    a = samplers.sample_prior(sched, 64, stream(44, "p"))
    b = samplers.sample_prior(sched, 64, stream(44, "p"))
    assert np.array_equal(a, b)


def test_sample_prior_empty():
    sched = NoiseSchedule()
    assert samplers.sample_prior(sched, 0, stream(45, "p")).shape == (0, 2)


def test_plan_validation():
    sched = NoiseSchedule()
    with pytest.raises(ValueError):
        samplers.StepPlan(sigmas=sigma_grid(sched), lam=1.0, solver="heun_ode")
    with pytest.raises(ValueError):
        samplers.StepPlan(sigmas=sigma_grid(sched), lam=0.0, solver="rk4")


def test_generate_deterministic():
    sched = NoiseSchedule(n_steps=16)
    a = samplers.generate(gaussian_score, sched, 32, seed=7)
    b = samplers.generate(gaussian_score, sched, 32, seed=7)
    assert np.array_equal(a, b)
