"""Directed surface distance between a reference cloud and a mesh, and latent NRMSE."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import PointCloud, as_points
from .kdtree import KdTree
from .meshing import TriangleMesh

log = logging.getLogger(__name__)

N_PRED_SAMPLES = 100_000


@dataclass
class DistanceReport:
    design_id: str
    mean_directed_distance: float
    n_ref: int
    d_max_reference: float

    def __post_init__(self):
        if not self.mean_directed_distance >= 0:
            raise ValueError("distance must be non-negative")

    @property
    def relative(self) -> float:
        """Distance as a fraction of the reference's largest bbox extent."""
        return self.mean_directed_distance / self.d_max_reference if self.d_max_reference > 0 else np.inf


def surface_distance(ref_points, pred_mesh: TriangleMesh, n_pred_samples: int = N_PRED_SAMPLES,
                     seed: int = 0, exact: bool = False) -> float:
    """Mean over reference points of the distance to the nearest predicted surface point.

    The predicted surface is represented by ``n_pred_samples`` area-weighted
    uniform samples in a KD-tree.  ``exact=True`` instead measures true
    point-to-triangle distances by brute force (for small cases).
    """
    ref = ref_points.points if isinstance(ref_points, PointCloud) else as_points(ref_points)
    if len(ref) == 0:
        raise ValueError("no reference points")
    if pred_mesh.is_empty:
        raise ValueError("no predicted surface")
    if exact:
        return float(point_mesh_distance(ref, pred_mesh).mean())
    samples = pred_mesh.sample_surface(int(n_pred_samples), np.random.default_rng(seed))
    d, _ = KdTree(samples).query(ref)
    return float(d.mean())


def distance_report(design_id: str, ref_points, pred_mesh: TriangleMesh, **kw) -> DistanceReport:
    ref = ref_points.points if isinstance(ref_points, PointCloud) else as_points(ref_points)
    d = surface_distance(ref, pred_mesh, **kw)
    return DistanceReport(design_id, d, len(ref), float(np.max(ref.max(axis=0) - ref.min(axis=0))))


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points ``p`` (n, 3) to triangles ``(a, b, c)`` (n, 3) each.

    Region classification on the barycentric plane (vertex, edge or face
    region), vectorised over rows.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        q = a + ab * v[:, None] + ac * w[:, None]  # face region

        e_ab = d1 / (d1 - d3)
        e_ac = d2 / (d2 - d6)
        e_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    # later assignments take priority, mirroring the early returns of the scalar version
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    q = np.where(on_bc[:, None], b + (c - b) * e_bc[:, None], q)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    q = np.where(on_ac[:, None], a + ac * e_ac[:, None], q)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    q = np.where(on_ab[:, None], a + ab * e_ab[:, None], q)
    q = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, q)
    q = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, q)
    q = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, q)
    return np.linalg.norm(p - q, axis=1)


def point_mesh_distance(points, mesh: TriangleMesh, chunk: int = 2_000_000) -> np.ndarray:
    """Exact distance from each point to the mesh (brute force over triangles)."""
    pts = as_points(points)
    a, b, c = mesh.corners()
    nt = len(a)
    out = np.empty(len(pts))
    step = max(1, chunk // max(nt, 1))
    for s in range(0, len(pts), step):
        p = pts[s:s + step]
        rep = np.repeat(p, nt, axis=0)
        d = point_triangle_distance(rep, np.tile(a, (len(p), 1)), np.tile(b, (len(p), 1)), np.tile(c, (len(p), 1)))
        out[s:s + step] = d.reshape(len(p), nt).min(axis=1)
    return out


def nrmse_per_dim(truth, pred, norm: str = "range"):
    """Per-dimension RMSE over designs, in percent of the truth range (or std).

    Accepts arrays or :class:`LatentTable` objects (matched by design id).
    Returns ``(per_dim, mean)``; dimensions with zero spread are NaN and
    left out of the mean.
    """
    t, p = _aligned(truth, pred)
    if norm == "range":
        scale = t.max(axis=0) - t.min(axis=0)
    elif norm == "std":
        scale = t.std(axis=0, ddof=1) if len(t) > 1 else np.zeros(t.shape[1])
    else:
        raise ValueError(f"unknown normalization {norm!r}")
    rmse = np.sqrt(np.mean((p - t) ** 2, axis=0))
    ok = scale > 0
    out = np.full(t.shape[1], np.nan)
    out[ok] = 100.0 * rmse[ok] / scale[ok]
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} latent dims have zero {norm}; NRMSE undefined there",
                      RuntimeWarning, stacklevel=2)
    mean = float(np.mean(out[ok])) if ok.any() else float("nan")
    return out, mean


def _aligned(truth, pred):
    if hasattr(truth, "design_ids") and hasattr(pred, "design_ids"):
        if set(truth.design_ids) != set(pred.design_ids):
            raise ValueError("truth and prediction cover different designs")
        order = [pred.design_ids.index(d) for d in truth.design_ids]
        return np.asarray(truth.codes, float), np.asarray(pred.codes, float)[order]
    t = np.asarray(getattr(truth, "codes", truth), dtype=np.float64)
    p = np.asarray(getattr(pred, "codes", pred), dtype=np.float64)
    if t.shape != p.shape or t.ndim != 2:
        raise ValueError(f"shape mismatch {t.shape} vs {p.shape}")
    return t, p


# -- reports --------------------------------------------------------------

def write_distance_csv(path, reports: list[DistanceReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design_id", "distance", "relative", "n_ref", "d_max"])
        for r in reports:
            w.writerow([r.design_id, repr(r.mean_directed_distance), repr(r.relative), r.n_ref,
                        repr(r.d_max_reference)])


def read_distance_csv(path) -> list[DistanceReport]:
    with open(path, newline="") as fh:
        return [DistanceReport(r["design_id"], float(r["distance"]), int(r["n_ref"]), float(r["d_max"]))
                for r in csv.DictReader(fh)]


def histogram_summary(values, bins: int = 30) -> dict:
    v = np.asarray(values, dtype=np.float64)
    counts, edges = np.histogram(v, bins=bins)
    return {
        "n": int(len(v)), "mean": float(v.mean()), "median": float(np.median(v)),
        "min": float(v.min()), "max": float(v.max()),
        "mode_bin_center": float(0.5 * (edges[np.argmax(counts)] + edges[np.argmax(counts) + 1])),
        "bin_edges": edges.tolist(), "counts": counts.tolist(),
    }


def write_histogram_json(path, values, bins: int = 30):
    Path(path).write_text(json.dumps(histogram_summary(values, bins), indent=2))


def section_extent_ratio(vertices, frac: float = 0.1, axis: int = 2, across: int = 0) -> float:
    """Extent along ``across`` of the top slab over that of the bottom slab.

    Slabs are the outer ``frac`` of the vertex range along ``axis``.  For a
    blade stood on z this tracks the top-to-bottom chord ratio.
    """
    v = as_points(vertices)
    if len(v) == 0:
        raise ValueError("no vertices")
    h = v[:, axis]
    lo, hi = h.min(), h.max()
    span = hi - lo
    top = v[h >= hi - frac * span, across]
    bot = v[h <= lo + frac * span, across]
    b = np.ptp(bot)
    return float(np.ptp(top) / b) if b > 0 else float("inf")
