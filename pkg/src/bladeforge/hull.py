"""3-D convex hull with outward face planes and the violation margin.

Facet topology comes from Qhull (``scipy.spatial.ConvexHull``); the plane
equations are recomputed here from the triangle corners and oriented away
from the hull-vertex centroid, so the sign convention does not depend on
Qhull's own orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull as _QHull
from scipy.spatial import QhullError

from ._accel import njit, prange, use_numba
from .errors import GeometryError
from .geom import PointCloud, as_points


@dataclass(frozen=True)
class ConvexHull:
    vertices: np.ndarray      # (v, 3)
    faces: np.ndarray         # (f, 3) indices into vertices
    face_normals: np.ndarray  # (f, 3) unit, outward
    face_offsets: np.ndarray  # (f,)  n_f . x <= b_f inside
    source_index: np.ndarray  # (v,) index of each vertex in the input cloud
    bins: "_NormalBins" = field(default=None, repr=False, compare=False)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def margin(self, x) -> np.ndarray:
        return violation_margin(self, x)


def _check_rank(pts: np.ndarray):
    if len(pts) < 4:
        raise GeometryError("degenerate hull: need at least 4 points")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0.0 or sv[2] <= 1e-12 * sv[0]:
        raise GeometryError("degenerate hull: input is coplanar or collinear")


def build_hull(cloud) -> ConvexHull:
    """Convex hull of a cloud (``PointCloud`` or ``(n, 3)`` array)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud)
    _check_rank(pts)
    try:
        qh = _QHull(pts)
    except QhullError as exc:
        raise GeometryError(f"degenerate hull: {exc}") from None

    src = np.asarray(qh.vertices, dtype=np.int64)
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[src] = np.arange(len(src))
    faces = remap[qh.simplices]
    verts = pts[src]

    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    # sliver facets from Qt triangulation: fall back to Qhull's own normal
    bad = norms <= 1e-14 * max(1.0, float(np.abs(verts).max()))
    normals[bad] = qh.equations[bad, :3]
    norms[bad] = np.linalg.norm(normals[bad], axis=1)
    normals /= norms[:, None]

    center = verts.mean(axis=0)
    offsets = np.einsum("ij,ij->i", normals, a)
    flip = np.einsum("ij,j->i", normals, center) > offsets
    normals[flip] *= -1.0
    offsets[flip] *= -1.0
    faces[flip] = faces[flip][:, ::-1]

    # rounding in the cross product must not leave a face's own corner outside
    offsets = np.maximum(offsets, np.einsum("ij,ij->i", normals, verts[faces[:, 1]]))
    offsets = np.maximum(offsets, np.einsum("ij,ij->i", normals, verts[faces[:, 2]]))
    return ConvexHull(verts, faces, normals, offsets, src, _NormalBins.build(normals, offsets, verts.mean(axis=0)))


def violation_margin(hull: ConvexHull, x):
    """``max_f (n_f . x - b_f)``: negative inside, zero on the boundary, positive outside.

    Accepts one point (returns a float) or an ``(m, 3)`` array.
    """
    arr = np.asarray(x, dtype=np.float64)
    q = as_points(arr)
    if use_numba():
        out = np.empty(len(q))
        bins = hull.bins if hull.bins is not None else _NormalBins.build(
            hull.face_normals, hull.face_offsets, hull.vertices.mean(axis=0))
        _margin_kernel(
            np.ascontiguousarray(q), hull.face_normals, hull.face_offsets,
            bins.origin, bins.ptr, bins.order, bins.axis, bins.radius, bins.min_height, out,
        )
    else:
        out = _margin_numpy(q, hull.face_normals, hull.face_offsets)
    return float(out[0]) if arr.ndim == 1 else out


def _margin_numpy(q, normals, offsets, chunk: int = 2048):
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        out[s:s + chunk] = (q[s:s + chunk] @ normals.T - offsets).max(axis=1)
    return out


@dataclass(frozen=True)
class _NormalBins:
    """Faces grouped by normal direction on a cube map.

    For a bin with mean normal ``c`` and spread ``r`` and any face f in it,
    ``n_f.(x - o) - h_f <= c.(x - o) + r|x - o| - min h`` where ``h_f`` is the
    face height above the origin ``o``; whole bins are skipped when that
    bound cannot beat the running maximum.
    """

    origin: np.ndarray
    ptr: np.ndarray
    order: np.ndarray
    axis: np.ndarray
    radius: np.ndarray
    min_height: np.ndarray

    @classmethod
    def build(cls, normals, offsets, origin, res: int = 12):
        major = np.argmax(np.abs(normals), axis=1)
        rows = np.arange(len(normals))
        lead = normals[rows, major]
        side = 2 * major + (lead > 0)
        other = np.stack([(major + 1) % 3, (major + 2) % 3], axis=1)
        uv = normals[rows[:, None], other] / np.abs(lead)[:, None]
        cell = np.clip(((uv + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
        key = (side * res + cell[:, 0]) * res + cell[:, 1]
        uniq, inv = np.unique(key, return_inverse=True)
        order = np.argsort(inv, kind="stable")
        counts = np.bincount(inv, minlength=len(uniq))
        ptr = np.concatenate([[0], np.cumsum(counts)])
        heights = offsets - normals @ origin
        axis = np.zeros((len(uniq), 3))
        np.add.at(axis, inv, normals)
        axis /= np.linalg.norm(axis, axis=1)[:, None]
        radius = np.zeros(len(uniq))
        np.maximum.at(radius, inv, np.linalg.norm(normals - axis[inv], axis=1))
        min_height = np.full(len(uniq), np.inf)
        np.minimum.at(min_height, inv, heights)
        return cls(np.asarray(origin, dtype=np.float64), ptr.astype(np.int64),
                   order.astype(np.int64), axis, radius, min_height)


@njit(cache=True, parallel=True)
def _margin_kernel(q, normals, offsets, origin, ptr, order, axis, radius, min_height, out):
    nb = ptr.shape[0] - 1
    for i in prange(q.shape[0]):
        x = q[i, 0]
        y = q[i, 1]
        z = q[i, 2]
        ux = x - origin[0]
        uy = y - origin[1]
        uz = z - origin[2]
        un = np.sqrt(ux * ux + uy * uy + uz * uz)
        bound = np.empty(nb)
        top = 0
        for b in range(nb):
            bound[b] = axis[b, 0] * ux + axis[b, 1] * uy + axis[b, 2] * uz + radius[b] * un - min_height[b]
            if bound[b] > bound[top]:
                top = b
        best = -np.inf
        for j in range(ptr[top], ptr[top + 1]):
            f = order[j]
            v = normals[f, 0] * x + normals[f, 1] * y + normals[f, 2] * z - offsets[f]
            if v > best:
                best = v
        slack = 1e-12 * (1.0 + un)
        for b in range(nb):
            if b == top or bound[b] < best - slack:
                continue
            for j in range(ptr[b], ptr[b + 1]):
                f = order[j]
                v = normals[f, 0] * x + normals[f, 1] * y + normals[f, 2] * z - offsets[f]
                if v > best:
                    best = v
        out[i] = best
