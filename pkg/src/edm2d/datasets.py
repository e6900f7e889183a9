"""2D dataset generators and analytic oracles.

Gaussian mixtures have closed-form density, score and energy under the
forward perturbation: convolving a mixture with N(0, sigma^2 I) only adds
sigma^2 I to every component covariance.  This makes mixtures exact
verification oracles for everything downstream, and lets an AnalyticGMM
stand in for a trained model (it exposes the same energy/score/denoise
surface).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class AnalyticGMM:
    """Mixture of Gaussians with exact perturbed density/score/energy."""

    weights: Array
    means: Array        # (K, d)
    covs: Array         # (K, d, d), symmetric positive-definite

    # duck-typed model surface: analytic energies are valid at sigma = 0
    min_sigma: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.covs, dtype=np.float64)
        if c.ndim == 2:
            c = c[None]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)
        if w.ndim != 1 or len(w) != len(m) or len(w) != len(c):
            raise ValueError("component count mismatch")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")
        for k, cov in enumerate(c):
            if not np.allclose(cov, cov.T):
                raise ValueError(f"covariance {k} not symmetric")
            if np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError(f"covariance {k} not positive-definite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def _prepared(self, x, sigma) -> tuple[Array, Array, Array, Array]:
        """diff (n, K, d), precision (n, K, d, d), component log-pdfs (n, K),
        per-sample sigma (n,).  sigma may be scalar or per-sample."""
        n, d = x.shape
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        covs = self.covs[None] + (s * s)[:, None, None, None] * np.eye(d)
        prec = np.linalg.inv(covs)
        _, logdet = np.linalg.slogdet(covs)
        diff = x[:, None, :] - self.means[None]
        maha = np.einsum("nki,nkij,nkj->nk", diff, prec, diff)
        logpdf = -0.5 * (maha + logdet + d * math.log(2 * math.pi))
        return diff, prec, logpdf, s

    def log_density(self, x, sigma=0.0) -> Array:
        """Exact log-density of the sigma-perturbed mixture."""
        xb, single = _as_batch(x, self.dim)
        _, _, logpdf, _ = self._prepared(xb, sigma)
        comp = logpdf + np.log(self.weights)
        m = comp.max(axis=1, keepdims=True)
        out = (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True)))[:, 0]
        return out[0] if single else out

    def score(self, x, sigma=0.0) -> Array:
        """Gradient of the perturbed log-density (responsibility-weighted)."""
        xb, single = _as_batch(x, self.dim)
        diff, prec, logpdf, _ = self._prepared(xb, sigma)
        logs = logpdf + np.log(self.weights)
        m = logs.max(axis=1, keepdims=True)
        resp = np.exp(logs - m)
        resp /= resp.sum(axis=1, keepdims=True)
        comp_scores = -np.einsum("nkij,nkj->nki", prec, diff)
        out = (resp[:, :, None] * comp_scores).sum(axis=1)
        return out[0] if single else out

    def energy(self, x, sigma=0.0) -> Array:
        """Negative perturbed log-density, so p_sigma(x) = exp(-E)."""
        return -self.log_density(x, sigma)

    def denoise(self, x, sigma) -> Array:
        """Posterior-mean denoiser x + sigma^2 * score(x, sigma)."""
        xb, single = _as_batch(x, self.dim)
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(xb),))
        out = xb + (s * s)[:, None] * self.score(xb, s)
        return out[0] if single else out

    def sample(self, n: int, rng: np.random.Generator) -> Array:
        if n == 0:
            return np.zeros((0, self.dim))
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        chols = [np.linalg.cholesky(c) for c in self.covs]
        eps = rng.standard_normal((n, self.dim))
        for k in range(self.n_components):
            mask = ks == k
            out[mask] = self.means[k] + eps[mask] @ chols[k].T
        return out

    def moments(self) -> tuple[Array, Array]:
        """Exact mean and covariance of the mixture."""
        mean = self.weights @ self.means
        cov = np.zeros((self.dim, self.dim))
        for w, mu, c in zip(self.weights, self.means, self.covs):
            diff = mu - mean
            cov += w * (c + np.outer(diff, diff))
        return mean, cov


def _as_batch(x, dim: int) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape != (dim,):
            raise ValueError(f"point has dimension {x.shape}, expected {dim}")
        return x[None, :], True
    if x.shape[1] != dim:
        raise ValueError(f"batch has dimension {x.shape[1]}, expected {dim}")
    return x, False


# convenience wrappers matching the operation-level contracts ---------------

def perturbed_log_density(gmm: AnalyticGMM, x, sigma: float) -> Array:
    return gmm.log_density(x, sigma)


def perturbed_score(gmm: AnalyticGMM, x, sigma: float) -> Array:
    return gmm.score(x, sigma)


def perturbed_energy(gmm: AnalyticGMM, x, sigma: float) -> Array:
    return gmm.energy(x, sigma)


def product_gmm(a: AnalyticGMM, b: AnalyticGMM) -> AnalyticGMM:
    """Exact product mixture (pairwise Gaussian products, renormalized)."""
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    d = a.dim
    weights, means, covs = [], [], []
    for wa, ma, ca in zip(a.weights, a.means, a.covs):
        pa = np.linalg.inv(ca)
        for wb, mb, cb in zip(b.weights, b.means, b.covs):
            pb = np.linalg.inv(cb)
            cov = np.linalg.inv(pa + pb)
            mean = cov @ (pa @ ma + pb @ mb)
            # mass of the product: N(ma - mb; 0, ca + cb)
            s = ca + cb
            diff = ma - mb
            _, logdet = np.linalg.slogdet(s)
            logz = -0.5 * (diff @ np.linalg.solve(s, diff) + logdet
                           + d * math.log(2 * math.pi))
            weights.append(wa * wb * math.exp(logz))
            means.append(mean)
            covs.append(cov)
    w = np.array(weights)
    return AnalyticGMM(w / w.sum(), np.array(means), np.array(covs))


def single_gaussian(mean, cov) -> AnalyticGMM:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(len(mean))
    return AnalyticGMM(np.array([1.0]), mean[None], cov[None])


# fractal tree ---------------------------------------------------------------

def _rot(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def fractal_tree_gmm(depth: int = 4, branch_angle: float = math.radians(25.0),
                     length_decay: float = 0.7, components_per_branch: int = 3,
                     trunk_length: float = 1.0, anisotropy: float = 8.0) -> AnalyticGMM:
    """Deterministic recursive tree mixture.

    The vertical trunk carries `components_per_branch` equally weighted
    Gaussians elongated along its axis (axis:perpendicular std ratio
    `anisotropy`); each branch spawns two children rotated by +-
    `branch_angle` and scaled by `length_decay`.  Component weights are
    proportional to branch length, renormalized over the whole tree.
    """
    if depth < 1:
        raise ValueError("depth must be at least 1")
    weights, means, covs = [], [], []

    def add_branch(start: Array, direction: Array, length: float, level: int):
        m = components_per_branch
        axis_std = length / (2.0 * m)
        perp_std = axis_std / anisotropy
        # covariance aligned with the branch direction
        u = direction
        v = np.array([-u[1], u[0]])
        cov = axis_std ** 2 * np.outer(u, u) + perp_std ** 2 * np.outer(v, v)
        for j in range(m):
            frac = (j + 0.5) / m
            weights.append(length)
            means.append(start + frac * length * u)
            covs.append(cov)
        if level + 1 < depth:
            tip = start + length * u
            for sign in (+1.0, -1.0):
                child_dir = _rot(sign * branch_angle) @ u
                add_branch(tip, child_dir, length * length_decay, level + 1)

    add_branch(np.zeros(2), np.array([0.0, 1.0]), trunk_length, 0)
    w = np.array(weights)
    return AnalyticGMM(w / w.sum(), np.array(means), np.array(covs))


# dataset specs ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    """Named 2D dataset with kind-specific parameters."""

    kind: str = "gmm"
    params: dict = field(default_factory=dict)

    KINDS = ("gaussian", "gmm", "spiral", "fractal_tree", "composition_pair")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")


def three_blob_gmm(spread: float = 0.8, std: float = 0.35) -> AnalyticGMM:
    """Default 3-component mixture used by the distillation checks."""
    angles = np.array([math.pi / 2, math.pi / 2 + 2 * math.pi / 3,
                       math.pi / 2 + 4 * math.pi / 3])
    means = spread * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.array([std ** 2 * np.eye(2)] * 3)
    return AnalyticGMM(np.full(3, 1 / 3), means, covs)


def composition_pair(variant: str = "cross") -> tuple[AnalyticGMM, AnalyticGMM]:
    """Pairs of densities whose product is the composition target.

    "cross": two elongated Gaussians crossing off-center; the product is a
    compact single mode distinct from both marginals.
    "two_mode": each factor is a 2-component mixture sharing one mode; the
    product concentrates on the shared mode, a configuration where plain
    summed-score reverse diffusion misallocates mass.
    """
    if variant == "cross":
        p1 = single_gaussian([0.0, 0.5], np.diag([1.0 ** 2, 0.15 ** 2]))
        p2 = single_gaussian([0.5, 0.0], np.diag([0.15 ** 2, 1.0 ** 2]))
        return p1, p2
    if variant == "two_mode":
        s2 = 0.32 ** 2
        cov = np.array([s2 * np.eye(2)] * 2)
        p1 = AnalyticGMM(np.array([0.5, 0.5]),
                         np.array([[0.0, 1.0], [-1.6, -0.8]]), cov)
        p2 = AnalyticGMM(np.array([0.5, 0.5]),
                         np.array([[0.0, 1.0], [1.6, -0.8]]), cov)
        return p1, p2
    raise ValueError(f"unknown composition variant {variant!r}")


def spiral_sample(n: int, rng: np.random.Generator, turns: float = 2.0,
                  scale: float = 1.0, noise: float = 0.03) -> Array:
    """Archimedean spiral with isotropic jitter (no analytic oracle)."""
    if n == 0:
        return np.zeros((0, 2))
    t = np.sqrt(rng.uniform(0.0, 1.0, n))  # uniform arc density toward the rim
    theta = 2 * math.pi * turns * t
    r = scale * t
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


def oracle_for(spec: DatasetSpec) -> AnalyticGMM | None:
    """Analytic mixture for specs that have one (spiral does not)."""
    p = spec.params
    if spec.kind == "gaussian":
        return single_gaussian(p.get("mean", [0.0, 0.0]), p.get("cov", 1.0))
    if spec.kind == "gmm":
        if "weights" in p:
            return AnalyticGMM(np.asarray(p["weights"], dtype=np.float64),
                               np.asarray(p["means"], dtype=np.float64),
                               np.asarray(p["covs"], dtype=np.float64))
        return three_blob_gmm(p.get("spread", 0.8), p.get("std", 0.35))
    if spec.kind == "fractal_tree":
        return fractal_tree_gmm(
            depth=p.get("depth", 4),
            branch_angle=math.radians(p.get("branch_angle_deg", 25.0)),
            length_decay=p.get("length_decay", 0.7),
            components_per_branch=p.get("components_per_branch", 3))
    return None


def sample(spec: DatasetSpec, n: int, rng: np.random.Generator) -> Array:
    """n i.i.d. draws from the specified distribution."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if spec.kind == "spiral":
        p = spec.params
        return spiral_sample(n, rng, turns=p.get("turns", 2.0),
                             scale=p.get("scale", 1.0), noise=p.get("noise", 0.03))
    if spec.kind == "composition_pair":
        raise ValueError("composition_pair is a pair of densities; sample its "
                         "factors or their product explicitly")
    gmm = oracle_for(spec)
    assert gmm is not None
    return gmm.sample(n, rng)


def estimate_sigma_data(spec: DatasetSpec, seed: int, n: int = 1 << 14) -> float:
    """Root-mean-square coordinate value of the dataset."""
    from .rngstreams import stream
    xs = sample(spec, n, stream(seed, "sigma-data-estimate"))
    return float(np.sqrt(np.mean(xs * xs)))
