"""Discretized reverse-process kernels.

Steps are parameterized by sigma directly; the per-step diffusion budget is
Delta = sigma_i^2 - sigma_next^2, which makes the lambda-family Euler step

    mean  = x + Delta * (1 + lambda^2)/2 * score(x, sigma_i)
    x'    = mean + lambda * sqrt(Delta) * noise

an evaluable Gaussian transition.  lambda = 0 gives the probability-flow
drift; the deterministic second-order solver (Heun) integrates
dx/dsigma = -sigma * score(x, sigma) with a predictor-corrector pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rngstreams import stream
from .schedules import NoiseSchedule, sigma_grid

Array = np.ndarray

SOLVERS = ("euler_sde", "heun_ode")


@dataclass(frozen=True)
class StepPlan:
    sigmas: Array                 # decreasing grid ending in 0
    lam: float = 0.0
    solver: str = "heun_ode"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.solver == "heun_ode" and self.lam != 0.0:
            raise ValueError("heun_ode requires lambda = 0")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass(frozen=True)
class TransitionRecord:
    """Gaussian transition (mean, stdev^2 I); density evaluable for stdev > 0."""

    mean: Array
    stdev: float

    def log_density_at(self, x_next: Array) -> Array:
        if self.stdev <= 0:
            raise ValueError("transition density undefined for a deterministic step")
        diff = np.asarray(x_next) - self.mean
        d = diff.shape[-1]
        sq = (diff * diff).sum(axis=-1)
        return -0.5 * sq / self.stdev ** 2 - d * (math.log(self.stdev)
                                                  + 0.5 * math.log(2 * math.pi))


def transition_log_density(rec: TransitionRecord, x_next: Array) -> Array:
    return rec.log_density_at(x_next)


def euler_step(score_fn, x: Array, sigma: float, sigma_next: float,
               lam: float, noise: Array) -> tuple[Array, TransitionRecord]:
    """One stochastic reverse step from sigma to sigma_next."""
    if not sigma > sigma_next >= 0:
        raise ValueError(f"need sigma > sigma_next >= 0, got {sigma}, {sigma_next}")
    delta = sigma * sigma - sigma_next * sigma_next
    mean = x + delta * (1.0 + lam * lam) / 2.0 * score_fn(x, sigma)
    stdev = lam * math.sqrt(delta)
    x_next = mean + stdev * np.asarray(noise) if lam > 0 else mean
    return x_next, TransitionRecord(mean=mean, stdev=stdev)


def heun_step(score_fn, x: Array, sigma: float, sigma_next: float) -> Array:
    """Second-order probability-flow step; the step to sigma_next = 0 skips
    the corrector (single score evaluation)."""
    if not sigma > sigma_next >= 0:
        raise ValueError(f"need sigma > sigma_next >= 0, got {sigma}, {sigma_next}")
    d_cur = -sigma * score_fn(x, sigma)
    x_pred = x + (sigma_next - sigma) * d_cur
    if sigma_next == 0:
        return x_pred
    d_next = -sigma_next * score_fn(x_pred, sigma_next)
    return x + (sigma_next - sigma) * 0.5 * (d_cur + d_next)


def sample_prior(schedule: NoiseSchedule, n: int, rng: np.random.Generator,
                 dim: int = 2) -> Array:
    """n draws from N(0, sigma_max^2 I)."""
    return schedule.sigma_max * rng.standard_normal((n, dim))


def generate(score_fn, schedule: NoiseSchedule, n: int, seed: int,
             plan: StepPlan | None = None, dim: int = 2) -> Array:
    """Run the full reverse process for a batch of n chains.

    Noise streams are keyed (seed, "prior") and (seed, "proposal", step),
    the same keying the SMC loop uses, so a potential-free SMC run is
    bitwise identical to this sampler.
    """
    if plan is None:
        plan = StepPlan(sigmas=sigma_grid(schedule), lam=0.0, solver="heun_ode")
    x = sample_prior(schedule, n, stream(seed, "prior"), dim=dim)
    grid = np.asarray(plan.sigmas)
    for i in range(1, len(grid)):
        s_prev, s_cur = float(grid[i - 1]), float(grid[i])
        if plan.solver == "heun_ode":
            x = heun_step(score_fn, x, s_prev, s_cur)
        else:
            noise = stream(seed, "proposal", i).standard_normal(x.shape)
            x, _ = euler_step(score_fn, x, s_prev, s_cur, plan.lam, noise)
    return x
