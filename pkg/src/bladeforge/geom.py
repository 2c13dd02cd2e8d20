"""Point clouds, bounding boxes and unit-cube normalization.

Points are plain ``(n, 3)`` float64 arrays throughout the package; the small
dataclasses here only attach identity and bookkeeping to them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected (n, 3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise GeometryError("Aabb min exceeds max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of(cls, points) -> "Aabb":
        pts = as_points(points)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def inflate(self, pad: float) -> "Aabb":
        return Aabb(self.min - pad, self.max + pad)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        pts = as_points(points)
        return np.all((pts >= self.min - tol) & (pts <= self.max + tol), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.min + rng.random((n, 3)) * self.extent


@dataclass
class PointCloud:
    points: np.ndarray
    design_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = as_points(self.points)
        if len(self.points) == 0:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud has non-finite coordinates")

    def __len__(self):
        return len(self.points)

    @property
    def bbox(self) -> Aabb:
        return Aabb.of(self.points)


@dataclass(frozen=True)
class UnitCubeTransform:
    """Uniform scale about a center; ``normalized = (p - center) * scale``."""

    scale: float
    center: np.ndarray

    def apply(self, points) -> np.ndarray:
        return (as_points(points) - self.center) * self.scale

    def invert(self, points) -> np.ndarray:
        return as_points(points) / self.scale + self.center

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "center": [float(c) for c in self.center]}

    @classmethod
    def from_dict(cls, d: dict) -> "UnitCubeTransform":
        return cls(float(d["scale"]), np.asarray(d["center"], dtype=np.float64))


def normalize_to_unit_cube(cloud: PointCloud):
    """Map a cloud into [-1, 1]^3 with one scale factor.

    The longest bbox side lands exactly on [-1, 1]; the other axes keep their
    proportions about the bbox center.  Returns ``(cloud, scale, center)``.
    """
    box = cloud.bbox
    max_extent = float(box.extent.max())
    if not max_extent > 0.0:
        raise GeometryError("degenerate extent")
    scale = 2.0 / max_extent
    center = box.center
    out = (cloud.points - center) * scale
    # rounding can leave |coord| a few ulps above 1
    np.clip(out, -1.0, 1.0, out=out)
    normalized = PointCloud(out, cloud.design_id, dict(cloud.meta))
    return normalized, scale, center

