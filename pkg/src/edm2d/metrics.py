"""Quantitative comparison of sample sets and learned energies.

Sliced 1-Wasserstein distance between point clouds, total variation
between grid-renormalized densities, moment summaries, and density-grid
export.  These back the acceptance checks in place of feature-space
metrics, which make no sense at 2D scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import write_csv_atomic

Array = np.ndarray


@dataclass(frozen=True)
class GridSpec:
    x_lo: float = -1.5
    x_hi: float = 1.5
    y_lo: float = -1.5
    y_hi: float = 1.5
    resolution: int = 200

    def __post_init__(self):
        if not (np.isfinite(self.x_lo) and np.isfinite(self.x_hi)
                and np.isfinite(self.y_lo) and np.isfinite(self.y_hi)):
            raise ValueError("grid ranges must be finite")
        if self.x_lo >= self.x_hi or self.y_lo >= self.y_hi:
            raise ValueError("grid ranges must be increasing")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")

    def points(self) -> Array:
        """Row-major (resolution^2, 2) grid points."""
        xs = np.linspace(self.x_lo, self.x_hi, self.resolution)
        ys = np.linspace(self.y_lo, self.y_hi, self.resolution)
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)

    @classmethod
    def around(cls, samples: Array, pad: float = 0.5, resolution: int = 200) -> "GridSpec":
        lo = samples.min(axis=0) - pad
        hi = samples.max(axis=0) + pad
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), resolution)


def sliced_w1(a: Array, b: Array, n_projections: int = 128,
              rng: np.random.Generator | None = None) -> float:
    """Mean over random unit directions of the 1D W1 between projections.

    Sample counts are matched by subsampling the larger set.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sample sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets differ in dimension")
    if rng is None:
        rng = np.random.default_rng(0)
    n = min(len(a), len(b))
    if len(a) > n:
        a = a[rng.choice(len(a), n, replace=False)]
    if len(b) > n:
        b = b[rng.choice(len(b), n, replace=False)]
    d = a.shape[1]
    total = 0.0
    for _ in range(n_projections):
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        pa = np.sort(a @ u)
        pb = np.sort(b @ u)
        total += float(np.mean(np.abs(pa - pb)))
    return total / n_projections


def grid_tv(energy_fn, oracle_log_density_fn, grid: GridSpec) -> float:
    """Half L1 distance between exp(-E) and exp(oracle), each renormalized
    to sum 1 over the grid.  Invariant to additive constants in E."""
    pts = grid.points()
    neg_e = -np.asarray(energy_fn(pts), dtype=np.float64)
    logq = np.asarray(oracle_log_density_fn(pts), dtype=np.float64)
    p = _normalize_log(neg_e)
    q = _normalize_log(logq)
    return 0.5 * float(np.abs(p - q).sum())


def _normalize_log(logp: Array) -> Array:
    m = logp.max()
    if not np.isfinite(m):
        raise ValueError("log values contain no finite mass")
    w = np.exp(logp - m)
    s = w.sum()
    if s <= 0:
        raise ValueError("zero total mass on the grid")
    return w / s


def export_density_grid(value_fn, grid: GridSpec, path) -> None:
    """CSV with columns x1, x2, value, row-major over the grid."""
    pts = grid.points()
    vals = np.asarray(value_fn(pts), dtype=np.float64)
    write_csv_atomic(path, ["x1", "x2", "value"],
                     [[float(p[0]), float(p[1]), float(v)] for p, v in zip(pts, vals)])


def moments(samples: Array) -> tuple[Array, Array]:
    """Sample mean and unbiased covariance."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (len(samples) - 1)
    return mean, cov
