"""Particle reweighting over the discretized reverse process.

The reverse diffusion (lambda = 1 Euler kernel) is the proposal Markov
chain; non-negative per-step potentials reweight its paths, and the
particle loop (propose, weight, adaptively resample with the systematic
scheme) approximates the reweighted measure.  Potentials cover tempering,
products of energies for composition, and hard region/denoiser indicators.

Everything is carried in log space; -inf encodes zero weight.  Proposal,
resampling and final-emission randomness come from disjoint counter-based
streams, so adding potentials never perturbs the proposal noise: with unit
potentials the loop is bitwise identical to plain ancestral sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileio import write_csv_atomic
from .rngstreams import stream
from .samplers import euler_step

Array = np.ndarray

POTENTIAL_KINDS = ("unit", "temperature", "composition_product",
                   "bounded_region", "bounded_denoiser")


class WeightCollapseError(RuntimeError):
    """Every particle weight is zero; the run cannot continue."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def _logsumexp(lw: Array) -> float:
    m = np.max(lw)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(lw - m).sum()))


def ess(log_weights: Array) -> float:
    """Effective sample size (sum w)^2 / sum w^2 of normalized weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    finite = lw > -np.inf
    if not finite.any():
        raise WeightCollapseError("all log-weights are -inf")
    m = lw[finite].max()
    w = np.zeros_like(lw)
    w[finite] = np.exp(lw[finite] - m)
    return float(w.sum() ** 2 / (w * w).sum())


def systematic_resample(weights: Array, u: float, n_out: int | None = None) -> Array:
    """Ancestor indices from a single uniform: thresholds (u+k)/K against
    the cumulative weights, K = n_out (defaults to len(weights)).  Index j
    is selected floor(K w_j) or ceil(K w_j) times."""
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be normalized and non-negative")
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    k = n_out if n_out is not None else len(w)
    positions = (u + np.arange(k)) / k
    cum = np.cumsum(w)
    cum[-1] = 1.0  # guard against roundoff in the last bin
    return np.minimum(np.searchsorted(cum, positions, side="right"), len(w) - 1)


@dataclass
class ParticleEnsemble:
    positions: Array            # (K, d)
    log_weights: Array          # (K,)
    step: int = 0
    ancestry: Array | None = None

    @property
    def n(self) -> int:
        return len(self.log_weights)

    def normalized_weights(self) -> Array:
        lw = self.log_weights
        m = lw[lw > -np.inf].max()
        w = np.zeros_like(lw)
        w[lw > -np.inf] = np.exp(lw[lw > -np.inf] - m)
        return w / w.sum()


def maybe_resample(ens: ParticleEnsemble, threshold: float, sigma: float,
                   floor: float, rng: np.random.Generator) -> ParticleEnsemble:
    """Systematic resample iff ESS < threshold*K and sigma is above the
    no-resample floor; weights reset to uniform and ancestry is recorded."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if ess(ens.log_weights) >= threshold * ens.n or sigma <= floor:
        return ens
    ancestors = systematic_resample(ens.normalized_weights(), float(rng.uniform()))
    return ParticleEnsemble(positions=ens.positions[ancestors],
                            log_weights=np.zeros(ens.n),
                            step=ens.step, ancestry=ancestors)


# -- potentials ---------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSpec:
    """Per-step reweighting function of the particle loop.

    kind "temperature" exponentiates one model's energy with schedule
    gammas; variant "incremental" (default) weights by the change
    -g_i E(x_i) + g_{i-1} E(x_{i-1}) so the path product telescopes to the
    terminal tempered density, "per_step" applies -g_i E(x_i) directly.
    kind "composition_product" does the same with the sum of several
    models' energies (variants "annealed_ratio" and "simple").  Bounded
    kinds are hard indicators on the state or on its denoised preimage.
    """

    kind: str = "unit"
    gammas: tuple[float, ...] | None = None
    variant: str = ""
    box_lo: tuple[float, ...] | None = None
    box_hi: tuple[float, ...] | None = None
    delta: float = 0.0
    resample_floor_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in POTENTIAL_KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind in ("temperature", "composition_product") and self.gammas is None:
            raise ValueError(f"{self.kind} requires a gamma schedule")
        if self.kind == "bounded_region":
            if self.box_lo is None or self.box_hi is None:
                raise ValueError("bounded_region requires box_lo/box_hi")
            if any(lo >= hi for lo, hi in zip(self.box_lo, self.box_hi)):
                raise ValueError("box lower bounds must be below upper bounds")
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.resample_floor_sigma < 0:
            raise ValueError("resample floor must be non-negative")
        if self.kind == "temperature" and self.variant not in ("", "incremental", "per_step"):
            raise ValueError(f"unknown temperature variant {self.variant!r}")
        if self.kind == "composition_product" and self.variant not in ("", "annealed_ratio", "simple"):
            raise ValueError(f"unknown composition variant {self.variant!r}")

    def needs_denoiser(self) -> bool:
        return self.kind == "bounded_denoiser"

    def n_models(self) -> int:
        if self.kind == "temperature":
            return 1
        if self.kind == "composition_product":
            return 2
        return 0


def linear_gammas(n: int, start: float, end: float = 1.0) -> tuple[float, ...]:
    return tuple(np.linspace(start, end, n))


def constant_gammas(n: int, value: float) -> tuple[float, ...]:
    return tuple(np.full(n, float(value)))


def _energy_sum(models, x: Array, sigma: float) -> Array:
    out = np.zeros(len(x))
    for m in models:
        s_eff = max(float(sigma), getattr(m, "min_sigma", 0.0))
        out += np.asarray(m.energy(x, s_eff))
    return out


def potential_log_g(spec: PotentialSpec, step: int, x: Array,
                    x_prev: Array | None, models, sigma: float,
                    sigma_prev: float | None,
                    denoised: Array | None = None,
                    proposal_mean: Array | None = None) -> Array:
    """Log potential of one step, vectorized over the particle axis.

    step 0 evaluates the initial potential on prior draws (x_prev unused).
    For the annealed-ratio composition potential, proposal_mean must carry
    the mean of the step's Gaussian proposal: the potential includes the
    backward(noising)/forward(proposal) kernel ratio that corrects for the
    summed-score proposal marginal (this is why those proposals must be
    lambda = 1 steps with an evaluable transition density).
    """
    k = len(x)
    if spec.kind == "unit":
        return np.zeros(k)
    if spec.kind == "bounded_region":
        lo = np.asarray(spec.box_lo)
        hi = np.asarray(spec.box_hi)
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        return np.where(inside, 0.0, -np.inf)
    if spec.kind == "bounded_denoiser":
        if denoised is None:
            raise ValueError("bounded_denoiser potential needs the denoised state")
        lo, hi = -1.0 + spec.delta, 1.0 - spec.delta
        inside = np.all((denoised >= lo) & (denoised <= hi), axis=1)
        return np.where(inside, 0.0, -np.inf)

    # energy-based kinds
    if len(models) < spec.n_models():
        raise ValueError(f"{spec.kind} potential needs {spec.n_models()} model(s)")
    gammas = spec.gammas
    assert gammas is not None
    active = models[:spec.n_models()]
    g_cur = gammas[step]
    e_cur = _energy_sum(active, x, sigma)
    incremental = spec.variant in ("", "incremental", "annealed_ratio")
    if step == 0 or not incremental:
        return -g_cur * e_cur
    assert x_prev is not None and sigma_prev is not None
    g_prev = gammas[step - 1]
    out = -g_cur * e_cur + g_prev * _energy_sum(active, x_prev, sigma_prev)
    if spec.kind == "composition_product":
        # backward/forward kernel ratio; both are N(., delta I) so the
        # normalizations cancel and only the quadratic forms remain
        if proposal_mean is None:
            raise ValueError("annealed_ratio composition needs the proposal mean")
        delta = sigma_prev * sigma_prev - sigma * sigma
        back = ((x_prev - x) ** 2).sum(axis=1)
        fwd = ((x - proposal_mean) ** 2).sum(axis=1)
        out = out + (fwd - back) / (2.0 * delta)
    return out


def composed_score(models, x: Array, sigma: float) -> Array:
    """Sum of the models' scores; the proposal drift for composition."""
    dims = {np.shape(m.score(x[:1] if np.ndim(x) == 2 else x, sigma))[-1] for m in models}
    if len(dims) != 1:
        raise ValueError("models disagree on dimension")
    out = np.zeros_like(np.asarray(x, dtype=np.float64))
    for m in models:
        out += np.asarray(m.score(x, sigma))
    return out


# -- the particle loop --------------------------------------------------------

@dataclass
class StepStats:
    step: int
    sigma: float
    ess: float
    resampled: bool
    logz_increment: float
    alive_fraction: float


@dataclass
class SMCReport:
    n_particles: int = 0
    rows: list[StepStats] = field(default_factory=list)

    @property
    def log_z(self) -> float:
        return sum(r.logz_increment for r in self.rows)

    def to_csv(self, path) -> None:
        write_csv_atomic(
            path,
            ["step", "sigma", "ess", "resampled", "logZ_increment", "alive_fraction"],
            [[r.step, float(r.sigma), float(r.ess), int(r.resampled),
              float(r.logz_increment), float(r.alive_fraction)] for r in self.rows])


def smc_run(score_fn, sigmas: Array, spec: PotentialSpec, models,
            n_particles: int, ess_threshold: float, seed: int,
            dim: int = 2, denoiser_fn=None) -> tuple[ParticleEnsemble, SMCReport]:
    """Run the particle loop over the sigma grid.

    Proposals are lambda = 1 Euler steps driven by score_fn; stream keying
    matches samplers.generate so unit potentials reproduce it bitwise.
    Returns the terminal ensemble (positions + log-weights) and per-step
    diagnostics.  Raises WeightCollapseError if every weight hits -inf.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    grid = np.asarray(sigmas, dtype=np.float64)
    if spec.gammas is not None and len(spec.gammas) != len(grid):
        raise ValueError(f"gamma schedule length {len(spec.gammas)} != grid length {len(grid)}")
    if spec.kind == "composition_product" and spec.variant in ("", "annealed_ratio") \
            and spec.gammas is not None and spec.gammas[-1] != 1.0:
        raise ValueError("annealed_ratio composition requires a terminal gamma of 1")
    if spec.needs_denoiser() and denoiser_fn is None:
        raise ValueError("bounded_denoiser potential needs a denoiser_fn")

    report = SMCReport(n_particles=n_particles)
    x = float(grid[0]) * stream(seed, "prior").standard_normal((n_particles, dim))
    denoised = denoiser_fn(x, float(grid[0])) if spec.needs_denoiser() else None
    log_g = potential_log_g(spec, 0, x, None, models, float(grid[0]), None, denoised)
    lw = log_g
    if not np.any(lw > -np.inf):
        raise WeightCollapseError("all particles dead after the initial weighting", report)
    report.rows.append(StepStats(0, float(grid[0]), ess(lw), False,
                                 _logsumexp(lw) - np.log(n_particles),
                                 float(np.mean(lw > -np.inf))))
    ens = ParticleEnsemble(positions=x, log_weights=lw, step=0)

    for i in range(1, len(grid)):
        s_prev, s_cur = float(grid[i - 1]), float(grid[i])
        pre_ess = ess(ens.log_weights)
        do_resample = (pre_ess < ess_threshold * n_particles
                       and s_prev > spec.resample_floor_sigma)
        if do_resample:
            u = float(stream(seed, "resample", i).uniform())
            ancestors = systematic_resample(ens.normalized_weights(), u)
            ens = ParticleEnsemble(positions=ens.positions[ancestors],
                                   log_weights=np.zeros(n_particles),
                                   step=ens.step, ancestry=ancestors)
        noise = stream(seed, "proposal", i).standard_normal((n_particles, dim))
        x_prev = ens.positions
        x_new, rec = euler_step(score_fn, x_prev, s_prev, s_cur, 1.0, noise)
        denoised = None
        if spec.needs_denoiser():
            s_den = max(s_cur, min(getattr(m, "min_sigma", 0.0) for m in models)
                        if models else 0.0)
            s_den = s_den if s_den > 0 else s_prev
            denoised = denoiser_fn(x_new, s_den)
        log_g = potential_log_g(spec, i, x_new, x_prev, models, s_cur, s_prev,
                                denoised, proposal_mean=rec.mean)
        before = _logsumexp(ens.log_weights)
        lw = ens.log_weights + log_g
        ens = ParticleEnsemble(positions=x_new, log_weights=lw, step=i,
                               ancestry=ens.ancestry)
        alive = float(np.mean(lw > -np.inf))
        if not np.any(lw > -np.inf):
            report.rows.append(StepStats(i, s_cur, 0.0, do_resample, -np.inf, 0.0))
            raise WeightCollapseError(f"all particles dead at step {i}", report)
        report.rows.append(StepStats(i, s_cur, pre_ess, do_resample,
                                     _logsumexp(lw) - before, alive))
    return ens, report


def emit_samples(ens: ParticleEnsemble, seed: int) -> Array:
    """Unweighted terminal samples: a final systematic resample keyed by
    (seed, "final-resample") when weights are non-uniform."""
    lw = ens.log_weights
    finite = lw[lw > -np.inf]
    if finite.size == ens.n and np.all(finite == finite[0]):
        return ens.positions.copy()
    u = float(stream(seed, "final-resample").uniform())
    ancestors = systematic_resample(ens.normalized_weights(), u)
    return ens.positions[ancestors]
