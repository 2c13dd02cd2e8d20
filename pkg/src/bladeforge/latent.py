"""Latent-space analysis and unconditional generation.

PCA with a fixed sign convention, axis traversal, per-dimension marginals,
interpolation between codes and diagonal-Gaussian sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

N_BINS = 30


def _codes(table) -> np.ndarray:
    c = np.asarray(getattr(table, "codes", table), dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("codes must be a 2-D table")
    return c


@dataclass
class PcaBasis:
    mean: np.ndarray
    components: np.ndarray           # (k, d), orthonormal rows
    explained_variance: np.ndarray   # (k,), non-increasing

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def explained_ratio(self) -> np.ndarray:
        tot = self.explained_variance.sum()
        return self.explained_variance / tot if tot > 0 else np.zeros_like(self.explained_variance)

    def project(self, codes) -> np.ndarray:
        return (_codes(codes) - self.mean) @ self.components.T

    def reconstruct(self, coords) -> np.ndarray:
        return self.mean + np.asarray(coords, dtype=np.float64) @ self.components

    def save(self, path):
        """JSON header next to a little-endian f32 blob ``mean | components``.

        The blob is for interchange; the JSON also keeps float64 copies so a
        reload is lossless.
        """
        path = Path(path)
        blob = np.concatenate([self.mean, self.components.ravel()]).astype("<f4")
        blob.tofile(path.with_suffix(".f32"))
        path.write_text(json.dumps({
            "latent_dim": int(len(self.mean)), "n_components": self.n_components,
            "blob": path.with_suffix(".f32").name, "blob_layout": "mean (d) then components (k*d), row-major",
            "explained_variance": self.explained_variance.tolist(),
            "mean": self.mean.tolist(), "components": self.components.tolist(),
        }, indent=1))

    @classmethod
    def load(cls, path) -> "PcaBasis":
        meta = json.loads(Path(path).read_text())
        return cls(np.asarray(meta["mean"]), np.asarray(meta["components"]).reshape(meta["n_components"], -1),
                   np.asarray(meta["explained_variance"]))


def fit_pca(codes, n_components: int | None = None) -> PcaBasis:
    """Eigendecomposition of the sample covariance (``ddof=1``).

    Each component is flipped so that its largest-magnitude entry is
    positive.  At most ``n_designs`` components are kept.
    """
    c = _codes(codes)
    n, d = c.shape
    if n < 2:
        raise ValueError("PCA needs at least two designs")
    mean = c.mean(axis=0)
    cov = np.cov(c, rowvar=False, ddof=1).reshape(d, d)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    v = v[:, order].T
    k = d if n_components is None else min(int(n_components), d)
    k = min(k, n) if n_components is not None else k
    v, w = v[:k], w[:k]
    pivot = np.argmax(np.abs(v), axis=1)
    v *= np.sign(v[np.arange(k), pivot])[:, None]
    return PcaBasis(mean, v, w)


def traverse(basis: PcaBasis, axis: int, coords) -> np.ndarray:
    """Codes ``mean + t * component[axis]`` for each ``t`` in ``coords``."""
    if not 0 <= axis < basis.n_components:
        raise ValueError(f"axis {axis} out of range (have {basis.n_components} components)")
    t = np.asarray(coords, dtype=np.float64).reshape(-1, 1)
    return basis.mean + t * basis.components[axis]


@dataclass
class Marginal:
    dim: int
    mean: float
    variance: float
    skewness: float
    bin_edges: np.ndarray
    counts: np.ndarray


def marginal_stats(codes, dims=None, bins: int = N_BINS) -> list[Marginal]:
    c = _codes(codes)
    if len(c) == 0:
        raise ValueError("no codes")
    dims = range(c.shape[1]) if dims is None else dims
    out = []
    for d in dims:
        x = c[:, d]
        var = float(x.var(ddof=1)) if len(x) > 1 else 0.0
        skew = float(stats.skew(x)) if var > 0 else 0.0
        counts, edges = np.histogram(x, bins=bins)
        out.append(Marginal(int(d), float(x.mean()), var, skew, edges, counts))
    return out


def interpolate(za, zb, alphas) -> np.ndarray:
    """``(1 - a) * za + a * zb`` for every ``a``."""
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape != zb.shape:
        raise ValueError("codes differ in dimension")
    a = np.asarray(alphas, dtype=np.float64).reshape(-1, 1)
    return (1.0 - a) * za + a * zb


def blend(anchors, weights) -> np.ndarray:
    """Convex combination of several codes; weights must be >= 0 and sum to 1.

    One weight vector gives one code; a ``(k, n_anchors)`` table gives ``k``.
    """
    z = _codes(anchors)
    single = np.ndim(weights) == 1
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if w.shape[1] != len(z):
        raise ValueError("one weight per anchor expected")
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("weights must be non-negative and sum to 1")
    out = w @ z
    return out[0] if single else out


@dataclass
class DiagonalGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma differ in shape")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def fit(cls, codes, temperature: float = 1.0) -> "DiagonalGaussian":
        c = _codes(codes)
        if len(c) < 2:
            raise ValueError("need at least two codes to fit a spread")
        return cls(c.mean(axis=0), c.std(axis=0, ddof=1), temperature)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "DiagonalGaussian":
        return cls(np.asarray(d["mu"]), np.asarray(d["sigma"]), float(d.get("temperature", 1.0)))


def sample_codes(g: DiagonalGaussian, n: int, seed: int = 0, temperature: float | None = None) -> np.ndarray:
    """``mu + tau * sigma * eps`` with ``eps ~ N(0, I)``, one row per sample."""
    if n <= 0:
        raise ValueError("n must be positive")
    tau = g.temperature if temperature is None else float(temperature)
    if tau < 0:
        raise ValueError("temperature must be non-negative")
    eps = np.random.default_rng(seed).standard_normal((int(n), len(g.mu)))
    return g.mu + tau * g.sigma * eps


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    r = stats.spearmanr(np.asarray(x, float), np.asarray(y, float))
    return float(r.statistic if hasattr(r, "statistic") else r[0])


def best_aligned_axis(basis: PcaBasis, codes, target, n_axes: int | None = None) -> tuple[int, float]:
    """Principal axis whose coordinates rank-correlate best with ``target``."""
    proj = basis.project(codes)
    k = basis.n_components if n_axes is None else min(n_axes, basis.n_components)
    rho = [spearman(proj[:, i], target) if np.ptp(proj[:, i]) > 0 else 0.0 for i in range(k)]
    i = int(np.argmax(np.abs(rho)))
    return i, rho[i]
