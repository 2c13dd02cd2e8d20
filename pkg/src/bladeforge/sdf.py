"""Truncated signed-distance labels from a point cloud.

Sign comes from the convex hull of the cloud (inside iff the violation margin
is at most ``tol_sign``); magnitude is the distance to the nearest cloud point
lying within ``tol_surf`` of the hull boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GeometryError, SamplingError
from .geom import Aabb, PointCloud, as_points
from .hull import ConvexHull, build_hull, violation_margin
from .io import read_samples, write_samples
from .kdtree import KdTree

DELTA = 0.1
TOL_SIGN = 0.0
TOL_SURF = 1e-3
N_SAMPLES = 20000
BAND_FRACTION = 0.5


@dataclass
class SignedField:
    hull: ConvexHull
    surf_points: np.ndarray
    surf_tree: KdTree
    bbox: Aabb
    tol_sign: float = TOL_SIGN
    tol_surf: float = TOL_SURF
    surf_index: np.ndarray = field(default=None, repr=False)

    def margin(self, x) -> np.ndarray:
        return violation_margin(self.hull, as_points(x))

    def sign(self, x) -> np.ndarray:
        return np.where(self.margin(x) <= self.tol_sign, -1.0, 1.0)

    def unclamped(self, x) -> np.ndarray:
        pts = as_points(x)
        return self.sign(pts) * self.surf_tree.query(pts)[0]


def build_field(cloud, tol_sign: float = TOL_SIGN, tol_surf: float = TOL_SURF) -> SignedField:
    pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
    hull = build_hull(pts)
    m = violation_margin(hull, pts)
    keep = np.flatnonzero(np.abs(m) <= tol_surf)
    if len(keep) == 0:
        raise GeometryError("tol_surf too small: no cloud point lies near the hull boundary")
    surf = pts[keep]
    return SignedField(hull, surf, KdTree(surf), Aabb.of(pts), float(tol_sign), float(tol_surf), keep)


def evaluate(field: SignedField, x, delta: float = DELTA):
    """Clamped signed distance ``clip(sign * dist, -delta, delta)``."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    arr = np.asarray(x, dtype=np.float64)
    s = np.clip(field.unclamped(arr), -delta, delta)
    return float(s[0]) if arr.ndim == 1 else s


@dataclass
class SdfSampleSet:
    design_id: str
    points: np.ndarray
    sdf: np.ndarray
    delta: float = DELTA
    band_fraction: float = BAND_FRACTION
    tol_sign: float = TOL_SIGN
    tol_surf: float = TOL_SURF
    seed: int = 0
    n_band: int = 0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sdf)

    def meta(self) -> dict:
        out = {
            "design_id": self.design_id, "delta": self.delta,
            "band_fraction": self.band_fraction, "seed": self.seed,
            "tol_sign": self.tol_sign, "tol_surf": self.tol_surf, "n_band": self.n_band,
        }
        out.update(self.extra)
        return out

    def save(self, path):
        write_samples(path, self.points, self.sdf, self.meta())

    @classmethod
    def load(cls, path) -> "SdfSampleSet":
        xyz, s, meta = read_samples(path)
        known = {"design_id", "delta", "band_fraction", "seed", "tol_sign", "tol_surf", "n_band", "n"}
        return cls(
            meta.get("design_id", Path(path).stem), xyz, s,
            float(meta.get("delta", DELTA)), float(meta.get("band_fraction", BAND_FRACTION)),
            float(meta.get("tol_sign", TOL_SIGN)), float(meta.get("tol_surf", TOL_SURF)),
            int(meta.get("seed", 0)), int(meta.get("n_band", 0)),
            {k: v for k, v in meta.items() if k not in known},
        )


def generate_samples(field: SignedField, n: int = N_SAMPLES, delta: float = DELTA,
                     band_fraction: float = BAND_FRACTION, rng_seed: int = 0,
                     design_id: str = "", noise_std: float | None = None,
                     max_budget: int = 100) -> SdfSampleSet:
    """Band samples near the surface plus uniform samples in the padded bbox.

    Band points are surface points jittered by isotropic Gaussian noise
    (std ``delta / 2`` unless given) and kept only when the unclamped label
    satisfies ``|s| <= delta``.  Uniform points fill the cloud bbox inflated
    by ``delta``.  All stored labels are clamped.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= band_fraction <= 1.0:
        raise ValueError("band_fraction must lie in [0, 1]")
    if delta <= 0:
        raise ValueError("delta must be positive")
    sigma = 0.5 * delta if noise_std is None else float(noise_std)
    rng = np.random.default_rng(rng_seed)
    n_band = int(round(band_fraction * n))

    band_x = np.empty((0, 3))
    band_s = np.empty(0)
    drawn = 0
    while len(band_s) < n_band:
        if drawn > max_budget * n_band:
            raise SamplingError("band sampling stalled")
        batch = max(2 * (n_band - len(band_s)), 256)
        base = field.surf_points[rng.integers(0, len(field.surf_points), batch)]
        x = base + rng.normal(scale=sigma, size=(batch, 3))
        s = field.unclamped(x)
        ok = np.abs(s) <= delta
        band_x = np.vstack([band_x, x[ok]])
        band_s = np.concatenate([band_s, s[ok]])
        drawn += batch
    band_x, band_s = band_x[:n_band], band_s[:n_band]

    box = field.bbox.inflate(delta)
    uni_x = box.sample(n - n_band, rng)
    uni_s = field.unclamped(uni_x)

    pts = np.vstack([band_x, uni_x])
    sdf = np.clip(np.concatenate([band_s, uni_s]), -delta, delta)
    return SdfSampleSet(design_id, pts, sdf, float(delta), float(band_fraction),
                        field.tol_sign, field.tol_surf, int(rng_seed), n_band)
