"""Conservativity probes for score fields.

A vector field is a gradient field iff its Jacobian is symmetric, so the
Frobenius norm of J - J^T measures how far a learned score is from being
conservative.  The full Jacobian is never materialized: per probe
nu ~ N(0, I), ||nu^T J - J nu||^2 is an unbiased estimate of
||J - J^T||_F^2, with nu^T J from a recorded reverse sweep and J nu from a
forward sweep.  The normalized variant divides by the probe-mean of
||nu^T J||^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import write_csv_atomic
from .rngstreams import stream

Array = np.ndarray


@dataclass(frozen=True)
class AsymmetryEstimate:
    raw: float          # estimate of ||J - J^T||_F^2
    normalized: float   # raw / estimate of ||J||_F^2 (nan if denominator 0)
    n_probes: int
    stderr: float       # standard error of the raw probe mean


class _FiniteDifferenceField:
    """jvp/vjp by central differences, for fields without recorded sweeps."""

    def __init__(self, fn, h_scale: float = 1e-4):
        self.fn = fn
        self.h_scale = h_scale

    def __call__(self, x, sigma):
        return self.fn(x, sigma)

    def _h(self, x) -> float:
        return self.h_scale * (1.0 + float(np.linalg.norm(x)))

    def score_jvp(self, x, sigma, v):
        h = self._h(x)
        return (self.fn(x + h * v, sigma) - self.fn(x - h * v, sigma)) / (2 * h)

    def score_vjp(self, x, sigma, v):
        # v^T J assembled column-wise from d jvps (d is small here)
        d = np.shape(x)[-1]
        out = np.zeros(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = 1.0
            out[j] = float(v @ self.score_jvp(x, sigma, e))
        return out


def wrap_field(fn, h_scale: float = 1e-4) -> _FiniteDifferenceField:
    """Give a bare callable field(x, sigma) the jvp/vjp surface."""
    return _FiniteDifferenceField(fn, h_scale)


def hutchinson_asymmetry(field, x: Array, sigma: float, n_probes: int,
                         rng: np.random.Generator) -> AsymmetryEstimate:
    """Probe-based estimate of the Jacobian asymmetry of `field` at x.

    `field` must expose score_jvp(x, sigma, v) and score_vjp(x, sigma, v)
    (models do; wrap_field adapts bare callables).
    """
    if n_probes < 1:
        raise ValueError("need at least one probe")
    x = np.asarray(x, dtype=np.float64)
    raws = np.empty(n_probes)
    dens = np.empty(n_probes)
    for i in range(n_probes):
        nu = rng.standard_normal(x.shape[-1])
        vj = np.asarray(field.score_vjp(x, sigma, nu))
        jv = np.asarray(field.score_jvp(x, sigma, nu))
        if not (np.all(np.isfinite(vj)) and np.all(np.isfinite(jv))):
            raise ArithmeticError("non-finite field derivative during probing")
        raws[i] = float(((vj - jv) ** 2).sum())
        dens[i] = float((vj ** 2).sum())
    raw = float(raws.mean())
    den = float(dens.mean())
    stderr = float(raws.std(ddof=1) / np.sqrt(n_probes)) if n_probes > 1 else 0.0
    normalized = raw / den if den > 0 else float("nan")
    return AsymmetryEstimate(raw=raw, normalized=normalized,
                             n_probes=n_probes, stderr=stderr)


def asymmetry_sweep(field, sample_fn, sigmas, n_points: int, n_probes: int,
                    seed: int) -> list[dict]:
    """Mean/stderr of raw and normalized asymmetry per sigma.

    Evaluation points at each sigma are perturbed data draws
    (sample_fn(n, rng) -> clean points), where the score is meaningful.
    """
    rows = []
    for k, s in enumerate(sigmas):
        rng = stream(seed, "asym", k)
        x0 = sample_fn(n_points, rng)
        xs = x0 + s * rng.standard_normal(x0.shape)
        raw = np.empty(n_points)
        norm = np.empty(n_points)
        for i in range(n_points):
            est = hutchinson_asymmetry(field, xs[i], float(s), n_probes, rng)
            raw[i] = est.raw
            norm[i] = est.normalized
        rows.append({
            "sigma": float(s),
            "raw_mean": float(raw.mean()),
            "raw_stderr": float(raw.std(ddof=1) / np.sqrt(n_points)) if n_points > 1 else 0.0,
            "norm_mean": float(np.nanmean(norm)),
            "norm_stderr": float(np.nanstd(norm, ddof=1) / np.sqrt(n_points)) if n_points > 1 else 0.0,
            "n_points": n_points,
            "n_probes": n_probes,
        })
    return rows


def sweep_to_csv(rows: list[dict], path) -> None:
    header = ["sigma", "raw_mean", "raw_stderr", "norm_mean", "norm_stderr",
              "n_points", "n_probes"]
    write_csv_atomic(path, header, [[r[k] for k in header] for r in rows])
