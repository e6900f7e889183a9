"""Noise schedule, forward perturbation kernel, and preconditioning.

Variance-exploding convention throughout: the forward kernel is
x_sigma = x0 + sigma * eps, i.e. alpha = 1, and a model's score relates to
its denoiser through score = (D - x) / sigma^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 10.0
    sigma_data: float = 1.0
    n_steps: int = 256
    rho: float = 7.0

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.n_steps < 2:
            raise ValueError("n_steps must be at least 2")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass(frozen=True)
class Precond:
    """Input/output/skip/noise scalings at one sigma."""

    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def sigma_grid(schedule: NoiseSchedule) -> Array:
    """Strictly decreasing sigma values from sigma_max to sigma_min, then 0.

    sigma_i = (sigma_max^(1/rho) + (i/(N-1)) * (sigma_min^(1/rho) -
    sigma_max^(1/rho)))^rho for i = 0..N-1, with a terminal 0 appended.
    """
    n, rho = schedule.n_steps, schedule.rho
    lo = schedule.sigma_min ** (1.0 / rho)
    hi = schedule.sigma_max ** (1.0 / rho)
    steps = (hi + np.arange(n) / (n - 1) * (lo - hi)) ** rho
    steps[0] = schedule.sigma_max  # exact endpoints (the powers round-trip inexactly)
    steps[-1] = schedule.sigma_min
    return np.append(steps, 0.0)


def perturb(x0: Array, sigma, eps: Array) -> Array:
    """Forward kernel: x0 + sigma * eps.  sigma may be scalar or per-sample."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    return np.asarray(x0, dtype=np.float64) + sigma * np.asarray(eps, dtype=np.float64)


def precond_at(sigma: float, sigma_data: float) -> Precond:
    """Scalings wrapping the raw network at noise level sigma.

    c_noise is undefined at sigma = 0; callers never evaluate networks there.
    """
    s2 = sigma * sigma + sigma_data * sigma_data
    return Precond(
        c_skip=sigma_data * sigma_data / s2,
        c_out=sigma * sigma_data / np.sqrt(s2),
        c_in=1.0 / np.sqrt(s2),
        c_noise=np.log(sigma) / 4.0 if sigma > 0 else -np.inf,
    )


def score_from_denoiser(x: Array, denoised: Array, sigma) -> Array:
    """Posterior-mean identity: score = (D - x) / sigma^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if sigma.ndim == 1:
        sigma = sigma[:, None]
    return (np.asarray(denoised) - np.asarray(x)) / (sigma * sigma)


def loss_weight(sigma, sigma_data: float):
    """Per-sigma training loss weight (sigma^2 + sigma_d^2) / (sigma*sigma_d)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2


def sample_train_sigmas(schedule: NoiseSchedule, n: int, rng: np.random.Generator) -> Array:
    """Training-time sigma draws: log-uniform on [sigma_min, sigma_max]."""
    lo, hi = np.log(schedule.sigma_min), np.log(schedule.sigma_max)
    return np.exp(rng.uniform(lo, hi, size=n))
