"""Synthetic parametric blades.

A blade is the linear loft between two coaxial cross-sections, the bottom one
at ``z = 0`` and a scaled copy at ``z = height``.  Each section is the convex
hull of two circles (the large and small "diameters" separated by the centre
distance), so the loft is itself convex and equals the convex hull of the two
sections.  Sections share the chord axis (x) with the large-circle centres
stacked on the z axis.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import GeometryError
from .geom import PointCloud
from .hull import build_hull
from .io import write_ply

log = logging.getLogger(__name__)

PARAM_RANGES = {
    "bld": (0.5, 2.0),
    "bsd": (0.2, 1.0),
    "bcd": (2.0, 4.0),
    "bbr": (5.0, 70.0),
    "btr": (5.0, 70.0),
    "k1": (0.2, 0.8),
    "k2": (0.2, 0.8),
    "k3": (0.2, 0.8),
    "lr": (2.0, 50.0),
    "tr": (2.0, 50.0),
}

BLADE_HEIGHT = 7.0
PROFILE_VERTICES = 256


@dataclass(frozen=True)
class BladeParams:
    bld: float
    bsd: float
    bcd: float
    bbr: float
    btr: float
    k1: float
    k2: float
    k3: float
    lr: float
    tr: float
    height: float = BLADE_HEIGHT
    seed: int = 0

    @property
    def ld(self) -> float:
        return self.k1 * self.bld

    @property
    def sd(self) -> float:
        return self.k2 * self.bsd

    @property
    def cd(self) -> float:
        return self.k3 * self.bcd

    def in_table_range(self) -> bool:
        return all(lo <= getattr(self, k) <= hi for k, (lo, hi) in PARAM_RANGES.items())

    def validate(self, strict: bool = True):
        if strict and not self.in_table_range():
            bad = [k for k, (lo, hi) in PARAM_RANGES.items() if not lo <= getattr(self, k) <= hi]
            raise GeometryError(f"parameters outside table ranges: {bad}")
        if min(self.ld, self.sd, self.cd, self.height) <= 0:
            raise GeometryError("derived top dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BladeParams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def sample_params(rng_seed: int) -> BladeParams:
    """Independent uniform draws over the table ranges."""
    rng = np.random.default_rng(rng_seed)
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES.items()}
    return BladeParams(**vals, seed=int(rng_seed))


def build_profile(large_d: float, small_d: float, center_dist: float,
                  n: int = PROFILE_VERTICES) -> np.ndarray:
    """Counter-clockwise ``(n, 2)`` outline of the hull of two circles.

    Circle A (diameter ``large_d``) sits at the origin and circle B
    (diameter ``small_d``) at ``(center_dist, 0)``.  Vertices are spaced
    uniformly in arc length; the closing edge back to vertex 0 is implicit.
    """
    r1, r2, d = 0.5 * large_d, 0.5 * small_d, float(center_dist)
    if r1 <= 0 or r2 <= 0 or d < 0:
        raise GeometryError("profile dimensions must be positive")
    if d == 0.0 or d == abs(r1 - r2):
        # one circle swallows the other: the hull is the bigger circle
        r, cx = (r1, 0.0) if r1 >= r2 else (r2, d)
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return np.column_stack([cx + r * np.cos(t), r * np.sin(t)])
    if d < abs(r1 - r2):
        raise GeometryError("center distance too small: one circle lies inside the other")

    phi = np.arccos((r1 - r2) / d)
    seg = np.sqrt(d * d - (r1 - r2) ** 2)
    # pieces in order: arc on B (-phi..phi), upper tangent, arc on A (phi..2pi-phi), lower tangent
    lengths = np.array([2 * phi * r2, seg, (2 * np.pi - 2 * phi) * r1, seg])
    edges = np.concatenate([[0.0], np.cumsum(lengths)])
    s = np.arange(n) * edges[-1] / n
    out = np.empty((n, 2))
    bx = np.array([d, 0.0])
    for piece in range(4):
        m = (s >= edges[piece]) & (s < edges[piece + 1])
        u = s[m] - edges[piece]
        if piece == 0:
            a = -phi + u / r2
            out[m] = bx + r2 * np.column_stack([np.cos(a), np.sin(a)])
        elif piece == 2:
            a = phi + u / r1
            out[m] = r1 * np.column_stack([np.cos(a), np.sin(a)])
        else:
            sgn = 1.0 if piece == 1 else -1.0
            pb = bx + r2 * np.array([np.cos(phi), sgn * np.sin(phi)])
            pa = r1 * np.array([np.cos(phi), sgn * np.sin(phi)])
            start, stop = (pb, pa) if piece == 1 else (pa, pb)
            out[m] = start + (u / seg)[:, None] * (stop - start)
    return out


@dataclass(frozen=True)
class BladeSolid:
    bottom_profile: np.ndarray
    top_profile: np.ndarray
    height: float

    @classmethod
    def from_params(cls, params: BladeParams, strict: bool = False) -> "BladeSolid":
        params.validate(strict=strict)
        bottom = build_profile(params.bld, params.bsd, params.bcd)
        top = build_profile(params.ld, params.sd, params.cd)
        return cls(bottom, top, float(params.height))

    def corner_points(self) -> np.ndarray:
        nb, nt = len(self.bottom_profile), len(self.top_profile)
        return np.vstack([
            np.column_stack([self.bottom_profile, np.zeros(nb)]),
            np.column_stack([self.top_profile, np.full(nt, self.height)]),
        ])

    def section(self, t: float) -> tuple[float, float]:
        """(chordwise, thickness) extent of the section at height fraction t."""
        (bx0, by0), (bx1, by1) = self.bottom_profile.min(0), self.bottom_profile.max(0)
        (tx0, ty0), (tx1, ty1) = self.top_profile.min(0), self.top_profile.max(0)
        chord = (1 - t) * (bx1 - bx0) + t * (tx1 - tx0)
        thick = (1 - t) * (by1 - by0) + t * (ty1 - ty0)
        return float(chord), float(thick)


def _sample_triangles(tri: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    pick = rng.choice(len(tri), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = tri[pick]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


def _sample_hull_volume(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    hull = build_hull(points)
    apex = hull.centroid
    tri = hull.vertices[hull.faces]
    vol = np.abs(np.einsum("ij,ij->i", np.cross(tri[:, 1] - apex, tri[:, 2] - apex), tri[:, 0] - apex)) / 6.0
    pick = rng.choice(len(tri), size=n, p=vol / vol.sum())
    # uniform barycentric weights on a tetrahedron
    w = -np.log(rng.random((n, 4)))
    w /= w.sum(axis=1, keepdims=True)
    t = tri[pick]
    return w[:, :1] * apex + w[:, 1:2] * t[:, 0] + w[:, 2:3] * t[:, 1] + w[:, 3:4] * t[:, 2]


def synthesize_cloud(params: BladeParams, n_surface: int, n_interior: int,
                     design_id: str = "", strict: bool = False) -> PointCloud:
    """Surface plus interior point cloud of a lofted blade, in model units.

    Surface points come first (``meta["n_surface"]`` of them).  Interior
    points are uniform inside the hull of the surface sample, so they never
    poke out of it.
    """
    if n_surface <= 0 or n_interior <= 0:
        raise ValueError("n_surface and n_interior must be positive")
    solid = BladeSolid.from_params(params, strict=strict)
    rng = np.random.default_rng([int(params.seed), 0xB1ADE])
    shell = build_hull(solid.corner_points())
    surface = _sample_triangles(shell.vertices[shell.faces], n_surface, rng)
    interior = _sample_hull_volume(surface, n_interior, rng)
    pts = np.vstack([surface, interior])
    return PointCloud(pts, design_id, {"n_surface": int(n_surface), "params": params.to_dict()})


def design_params(base_seed: int, index: int) -> BladeParams:
    seed = int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])
    return sample_params(seed)


def generate_dataset(out_dir, n_train: int = 222, n_test: int = 300, seed: int = 0,
                     n_surface: int = 10000, n_interior: int = 5000) -> dict:
    """Write ``design_<id>.ply`` files and ``manifest.json``; return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    designs = []
    for i in range(n_train + n_test):
        did = f"{i:04d}"
        params = design_params(seed, i)
        cloud = synthesize_cloud(params, n_surface, n_interior, design_id=did)
        write_ply(out / f"design_{did}.ply", cloud.points)
        designs.append({"design_id": did, "split": "train" if i < n_train else "test",
                        **params.to_dict()})
        log.debug("design %s done", did)
    manifest = {"base_seed": int(seed), "n_train": n_train, "n_test": n_test,
                "n_surface": n_surface, "n_interior": n_interior, "designs": designs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    return json.loads(p.read_text())
