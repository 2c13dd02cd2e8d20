"""Scalar grids, marching cubes, watertightness checks and mesh helpers."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._accel import njit, use_numba
from .io import write_obj, write_stl
from .mc_tables import CORNERS, EDGES, TRI_TABLE

log = logging.getLogger(__name__)

DEFAULT_RES = 128
DEFAULT_BOUND = 1.1


@dataclass
class ScalarGrid:
    """Field values on an ``R^3`` lattice spanning ``[lo, hi]^3`` (endpoints included).

    ``values[i, j, k]`` is the field at ``(x_i, y_j, z_k)``.
    """

    values: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or len(set(self.values.shape)) != 1:
            raise ValueError("grid values must be a cube array")
        if self.values.shape[0] < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid contains non-finite values")

    @property
    def res(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.res - 1)

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.res)

    def trilinear(self, pts) -> np.ndarray:
        p = (np.asarray(pts, dtype=np.float64).reshape(-1, 3) - self.lo) / self.spacing
        i0 = np.clip(np.floor(p).astype(np.int64), 0, self.res - 2)
        f = p - i0
        v = self.values
        out = np.zeros(len(p))
        for c in CORNERS:
            w = np.prod(np.where(c == 1, f, 1.0 - f), axis=1)
            out += w * v[i0[:, 0] + c[0], i0[:, 1] + c[1], i0[:, 2] + c[2]]
        return out

    def save(self, path):
        path = Path(path)
        self.values.astype("<f4").tofile(path)
        Path(str(path) + ".json").write_text(json.dumps(
            {"res": self.res, "lo": self.lo, "hi": self.hi, "dtype": "<f4", "order": "C (x, y, z)"}))

    @classmethod
    def load(cls, path) -> "ScalarGrid":
        meta = json.loads(Path(str(path) + ".json").read_text())
        r = meta["res"]
        vals = np.fromfile(path, dtype="<f4").reshape(r, r, r)
        return cls(vals, meta["lo"], meta["hi"])


def lattice_points(res: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    ax = np.linspace(lo, hi, res)
    g = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([c.ravel() for c in g], axis=1)


def sample_grid(model, z=None, res: int = DEFAULT_RES, lo: float = -DEFAULT_BOUND,
                hi: float = DEFAULT_BOUND, slab: int = 8) -> ScalarGrid:
    """Evaluate the decoder for code ``z`` (or any callable ``f(points)``) on a lattice.

    The raw, unclamped output is stored.
    """
    if callable(model) and not hasattr(model, "field"):
        f = model
    else:
        if getattr(model, "mode", "eval") != "eval":
            raise ValueError("sample_grid needs the decoder in eval mode")
        f = model.field(z)
    ax = np.linspace(lo, hi, res)
    vals = np.empty((res, res, res))
    yy, zz = np.meshgrid(ax, ax, indexing="ij")
    for s in range(0, res, slab):
        xs = ax[s:s + slab]
        pts = np.stack([
            np.repeat(xs, res * res),
            np.tile(yy.ravel(), len(xs)),
            np.tile(zz.ravel(), len(xs)),
        ], axis=1)
        vals[s:s + slab] = np.asarray(f(pts), dtype=np.float64).reshape(len(xs), res, res)
    return ScalarGrid(vals, lo, hi)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    @property
    def watertight(self) -> bool:
        return check_watertight(self)[0]

    def corners(self):
        t = self.vertices[self.triangles]
        return t[:, 0], t[:, 1], t[:, 2]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def volume(self) -> float:
        """Signed enclosed volume (positive for outward-facing triangles)."""
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def aspect_ratios(self) -> np.ndarray:
        """``L_max^2 * sqrt(3) / (4 * area)``: 1 for equilateral, grows for slivers."""
        a, b, c = self.corners()
        lmax2 = np.max(np.stack([
            np.sum((b - a) ** 2, axis=1), np.sum((c - b) ** 2, axis=1), np.sum((a - c) ** 2, axis=1),
        ]), axis=0)
        area = self.face_areas()
        with np.errstate(divide="ignore"):
            return np.where(area > 0, lmax2 * np.sqrt(3.0) / (4.0 * area), np.inf)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.is_empty:
            raise ValueError("no surface to sample")
        area = self.face_areas()
        pick = rng.choice(len(area), size=n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = (arr[pick] for arr in self.corners())
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c

    def save(self, path):
        path = Path(path)
        if path.suffix.lower() == ".stl":
            write_stl(path, self.vertices, self.triangles)
        else:
            write_obj(path, self.vertices, self.triangles)


# -- marching cubes -------------------------------------------------------

def _edge_vertices(v: np.ndarray, inside: np.ndarray, iso: float, lo: float, h: float):
    """One vertex per sign-changing lattice edge, numbered axis by axis."""
    r = v.shape[0]
    ids = []
    positions = []
    count = 0
    for axis in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[axis] = slice(0, r - 1)
        b[axis] = slice(1, r)
        cross = inside[tuple(a)] != inside[tuple(b)]
        idx = np.full(cross.shape, -1, dtype=np.int64)
        nz = np.nonzero(cross)
        m = len(nz[0])
        idx[nz] = np.arange(count, count + m)
        count += m
        v0 = v[tuple(a)][nz]
        v1 = v[tuple(b)][nz]
        t = (iso - v0) / (v1 - v0)
        node = np.stack(nz, axis=1).astype(np.float64)
        node[:, axis] += t
        positions.append(lo + h * node)
        pad = [(0, 0)] * 3
        pad[axis] = (0, 1)
        ids.append(np.pad(idx, pad, constant_values=-1))
    verts = np.concatenate(positions) if positions else np.empty((0, 3))
    return verts, np.stack(ids)


# local cube edge -> (axis, corner offset of its lower end)
_EDGE_AXIS = np.array([np.flatnonzero(CORNERS[e1] - CORNERS[e0])[0] for e0, e1 in EDGES], dtype=np.int64)
_EDGE_BASE = np.array([np.minimum(CORNERS[e0], CORNERS[e1]) for e0, e1 in EDGES], dtype=np.int64)


def _cube_cases(inside: np.ndarray) -> np.ndarray:
    r = inside.shape[0]
    case = np.zeros((r - 1,) * 3, dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:r - 1 + dx, dy:r - 1 + dy, dz:r - 1 + dz].astype(np.int64) << k
    return case


def _triangles_numpy(case: np.ndarray, ids: np.ndarray) -> np.ndarray:
    active = np.flatnonzero((case.ravel() > 0) & (case.ravel() < 255))
    if len(active) == 0:
        return np.empty((0, 3), dtype=np.int64)
    cidx = np.stack(np.unravel_index(active, case.shape), axis=1)
    table = TRI_TABLE[case.ravel()[active]]                       # (m, 16)
    slots = table[:, :15].reshape(len(active), 5, 3)
    valid = slots[:, :, 0] >= 0
    edges = np.where(slots >= 0, slots, 0)
    node = cidx[:, None, None, :] + _EDGE_BASE[edges]            # (m, 5, 3, 3)
    axis = _EDGE_AXIS[edges]
    vid = ids[axis, node[..., 0], node[..., 1], node[..., 2]]
    return vid[valid]


@njit(cache=True)
def _triangles_kernel(case, ids, tri_table, edge_axis, edge_base, out):
    r1 = case.shape[0]
    t = 0
    for i in range(r1):
        for j in range(r1):
            for k in range(r1):
                c = case[i, j, k]
                if c == 0 or c == 255:
                    continue
                for s in range(0, 15, 3):
                    if tri_table[c, s] < 0:
                        break
                    for q in range(3):
                        e = tri_table[c, s + q]
                        ax = edge_axis[e]
                        out[t, q] = ids[ax, i + edge_base[e, 0], j + edge_base[e, 1], k + edge_base[e, 2]]
                    t += 1
    return t


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Zero (or ``iso``) level set of a grid as an indexed, welded triangle mesh.

    Nodes with value below ``iso`` count as inside; triangles are wound so
    their normals point toward increasing field values.
    """
    v = grid.values
    inside = v < iso
    verts, ids = _edge_vertices(v, inside, iso, grid.lo, grid.spacing)
    if len(verts) == 0:
        warnings.warn("no sign change in grid; isosurface is empty", RuntimeWarning, stacklevel=2)
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    case = _cube_cases(inside)
    if use_numba():
        n_max = int(np.sum((case > 0) & (case < 255))) * 5
        out = np.empty((n_max, 3), dtype=np.int64)
        n = _triangles_kernel(case, ids, TRI_TABLE, _EDGE_AXIS, _EDGE_BASE, out)
        tris = out[:n]
    else:
        tris = _triangles_numpy(case, ids)
    # the table winds triangles toward the inside corners
    tris = tris[:, ::-1].copy()
    return TriangleMesh(verts, tris)


# -- validation -----------------------------------------------------------

def check_watertight(mesh: TriangleMesh):
    """``(ok, report)``: ok iff every edge has exactly two incident triangles
    that traverse it in opposite directions."""
    if mesh.is_empty:
        return False, {"reason": "empty", "boundary_edges": 0, "nonmanifold_edges": 0,
                       "inconsistent_edges": 0, "degenerate_triangles": 0}
    t = mesh.triangles
    degenerate = int(np.sum((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])))
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    nv = len(mesh.vertices)
    key_dir = directed[:, 0] * nv + directed[:, 1]
    und = np.sort(directed, axis=1)
    key_und = und[:, 0] * nv + und[:, 1]
    _, und_counts = np.unique(key_und, return_counts=True)
    _, dir_counts = np.unique(key_dir, return_counts=True)
    boundary = int(np.sum(und_counts == 1))
    nonmanifold = int(np.sum(und_counts > 2))
    inconsistent = int(np.sum(dir_counts > 1))
    ok = boundary == 0 and nonmanifold == 0 and inconsistent == 0 and degenerate == 0
    report = {"reason": "ok" if ok else "defects", "boundary_edges": boundary,
              "nonmanifold_edges": nonmanifold, "inconsistent_edges": inconsistent,
              "degenerate_triangles": degenerate}
    return ok, report


def close_boundary(grid: ScalarGrid) -> ScalarGrid:
    """Copy of ``grid`` whose outer shell of nodes is at least one cell outside.

    Spurious negative values on the domain faces would otherwise leave holes
    where the surface meets the box.
    """
    v = grid.values.copy()
    h = grid.spacing
    for axis in range(3):
        for end in (0, -1):
            idx = [slice(None)] * 3
            idx[axis] = end
            v[tuple(idx)] = np.maximum(v[tuple(idx)], h)
    return ScalarGrid(v, grid.lo, grid.hi)


def extract_mesh(model, z, res: int = DEFAULT_RES, lo: float = -DEFAULT_BOUND,
                 hi: float = DEFAULT_BOUND, closed: bool = True,
                 max_aspect: float | None = 20.0) -> TriangleMesh:
    """Decode ``z`` to a mesh: grid sampling, marching cubes, then (optionally)
    boundary closing and sliver removal."""
    grid = sample_grid(model, z, res, lo, hi)
    mesh = marching_cubes(close_boundary(grid) if closed else grid)
    if max_aspect is not None:
        mesh = remove_slivers(mesh, max_aspect)
    return mesh


# -- sliver removal -------------------------------------------------------

def _tri_normal(p):
    return np.cross(p[1] - p[0], p[2] - p[0])


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _aspect(p) -> float:
    l2 = max(np.dot(p[1] - p[0], p[1] - p[0]), np.dot(p[2] - p[1], p[2] - p[1]),
             np.dot(p[0] - p[2], p[0] - p[2]))
    area = 0.5 * np.linalg.norm(_tri_normal(p))
    return float(l2 * np.sqrt(3.0) / (4.0 * area)) if area > 0 else np.inf


def _manifold_fan(v, tris) -> bool:
    """Faces around ``v`` form one closed, consistently oriented disc.

    Also rejects an edge from ``v`` that would end up on more than two faces,
    which is what a collapse across a missing link would produce.
    """
    nxt = {}
    for tri in tris:
        t = [int(x) for x in tri]
        if t.count(v) != 1:
            return False
        k = t.index(v)
        a, b = t[(k + 1) % 3], t[(k + 2) % 3]
        if a == b or a in nxt:
            return False
        nxt[a] = b
    if set(nxt) != set(nxt.values()):
        return False
    start = next(iter(nxt))
    x, n = nxt[start], 1
    while x != start:
        x, n = nxt[x], n + 1
        if n > len(nxt):
            return False
    return n == len(nxt) and n >= 3


class _EditableMesh:
    def __init__(self, mesh: TriangleMesh):
        self.v = mesh.vertices.copy()
        self.t = mesh.triangles.copy()
        self.alive = np.ones(len(self.t), dtype=bool)
        self.vt = [set() for _ in range(len(self.v))]
        for f, tri in enumerate(self.t):
            for a in tri:
                self.vt[a].add(f)

    def pts(self, tri):
        return self.v[np.asarray(tri)]

    def edge_faces(self, a, b):
        return [f for f in self.vt[a] & self.vt[b]]

    def neighbours(self, a):
        out = set()
        for f in self.vt[a]:
            out.update(self.t[f])
        out.discard(a)
        return out

    def try_collapse(self, keep, drop, limit) -> bool:
        """Merge ``drop`` into ``keep`` (which does not move)."""
        shared = self.edge_faces(keep, drop)
        if len(shared) != 2:
            return False
        opposite = {int(x) for f in shared for x in self.t[f] if x not in (keep, drop)}
        common = self.neighbours(keep) & self.neighbours(drop)
        if common != opposite:
            # a valence-3 vertex capping a non-face triangle through the edge
            # blocks the collapse; removing it first is harmless
            for x in common - opposite:
                if len(self.vt[x]) == 3:
                    self.remove_valence3(x)
            shared = self.edge_faces(keep, drop)
            if len(shared) != 2:
                return False
        if len(self.neighbours(keep) | self.neighbours(drop)) <= 4:
            return False  # tetrahedron: nothing sensible left
        region = self.vt[keep] | self.vt[drop]
        new = {f: np.where(self.t[f] == drop, keep, self.t[f]) for f in self.vt[drop] - set(shared)}
        # a thin pocket (two faces on one edge whose apexes are keep and drop)
        # folds into a pair of opposite duplicates; both go
        faces = {f: self.t[f] for f in self.vt[keep] - set(shared)}
        faces.update(new)
        key = {}
        cancel = set()
        for f, tri in faces.items():
            k = frozenset(int(x) for x in tri)
            if k in key:
                cancel.update((key[k], f))
            else:
                key[k] = f
        faces = {f: t for f, t in faces.items() if f not in cancel}
        if not faces or not _manifold_fan(keep, faces.values()):
            return False  # would pinch the surface
        fan = sum(_unit(_tri_normal(self.pts(self.t[f]))) for f in self.vt[drop])
        for f, tri in new.items():
            if f in cancel:
                continue
            old_p = self.pts(self.t[f])
            # a sliver's own normal is noise; judge it against the fan instead
            ref = _tri_normal(old_p) if _aspect(old_p) <= limit else fan
            n = _tri_normal(self.pts(tri))
            if np.dot(n, ref) <= 0 or not np.any(n):
                return False
        before = [_aspect(self.pts(self.t[f])) for f in region]
        after = [_aspect(self.pts(t)) for t in faces.values()]
        worse = max(after) > max(limit, 0.999 * max(before))
        fewer_bad = sum(a > limit for a in after) < sum(b > limit for b in before)
        if worse and not fewer_bad:
            return False
        for f in set(shared) | cancel:
            self.alive[f] = False
            for a in self.t[f]:
                self.vt[a].discard(f)
        for f, tri in new.items():
            if f in cancel:
                continue
            self.t[f] = tri
            self.vt[keep].add(f)
        self.vt[drop] = set()
        return True

    def remove_valence3(self, v) -> bool:
        """Replace the three triangles around ``v`` by one; ``v`` becomes unused."""
        faces = list(self.vt[v])
        if len(faces) != 3:
            return False
        ring = {}
        for f in faces:
            t = list(self.t[f])
            k = t.index(v)
            ring[t[(k + 1) % 3]] = t[(k + 2) % 3]
        if len(ring) != 3:
            return False
        n0 = next(iter(ring))
        tri = np.array([n0, ring[n0], ring[ring[n0]]])
        if ring[tri[2]] != n0 or self.vt[tri[0]] & self.vt[tri[1]] & self.vt[tri[2]] - set(faces):
            return False
        fan = sum(_unit(_tri_normal(self.pts(self.t[f]))) for f in faces)
        if np.dot(_tri_normal(self.pts(tri)), fan) <= 0:
            return False
        keep, *gone = faces
        for f in faces:
            for a in self.t[f]:
                self.vt[a].discard(f)
        for f in gone:
            self.alive[f] = False
        self.t[keep] = tri
        for a in tri:
            self.vt[a].add(keep)
        return True

    def try_relocate(self, v, limit) -> bool:
        """Last resort: slide ``v`` toward its ring centroid within the tangent plane.

        Used where a collapse would pinch a thin feature.  The vertex leaves
        the isosurface by a fraction of the local edge length.
        """
        faces = list(self.vt[v])
        if not faces:
            return False
        ring = np.array(sorted(self.neighbours(v)))
        normals = [_tri_normal(self.pts(self.t[f])) for f in faces]
        fan = _unit(sum(_unit(n) for n in normals))
        step = self.v[ring].mean(axis=0) - self.v[v]
        step -= np.dot(step, fan) * fan
        old = self.v[v].copy()
        worst_before = max(_aspect(self.pts(self.t[f])) for f in faces)
        for frac in (1.0, 0.5, 0.25):
            self.v[v] = old + frac * step
            ok = all(np.dot(_tri_normal(self.pts(self.t[f])), n) > 0 for f, n in zip(faces, normals))
            if ok and max(_aspect(self.pts(self.t[f])) for f in faces) < worst_before:
                return True
        self.v[v] = old
        return False

    def try_flip(self, a, b, limit) -> bool:
        shared = self.edge_faces(a, b)
        if len(shared) != 2:
            return False
        f1, f2 = shared
        t1 = list(self.t[f1])
        # rotate so that f1 reads (a, b, c)
        while not (t1[0] == a and t1[1] == b):
            if t1[0] == b and t1[1] == a:
                a, b = b, a
                continue
            t1 = t1[1:] + t1[:1]
        c = t1[2]
        d = [x for x in self.t[f2] if x not in (a, b)][0]
        if c == d or d in self.neighbours(c):
            return False
        n_old = _tri_normal(self.pts(self.t[f1])) / max(np.linalg.norm(_tri_normal(self.pts(self.t[f1]))), 1e-300) \
            + _tri_normal(self.pts(self.t[f2])) / max(np.linalg.norm(_tri_normal(self.pts(self.t[f2]))), 1e-300)
        n1, n2 = np.array([a, d, c]), np.array([d, b, c])
        worst_before = max(_aspect(self.pts(self.t[f1])), _aspect(self.pts(self.t[f2])))
        for tri in (n1, n2):
            n = _tri_normal(self.pts(tri))
            if np.dot(n, n_old) <= 0:
                return False
        worst_after = max(_aspect(self.pts(n1)), _aspect(self.pts(n2)))
        if worst_after >= worst_before:
            return False
        self.vt[b].discard(f1)
        self.vt[a].discard(f2)
        self.t[f1], self.t[f2] = n1, n2
        self.vt[d].add(f1)
        self.vt[c].add(f2)
        return True


def remove_slivers(mesh: TriangleMesh, max_aspect: float = 20.0, max_rounds: int = 20) -> TriangleMesh:
    """Improve triangles whose aspect ratio exceeds ``max_aspect``.

    Needles lose their short edge by collapsing one endpoint onto the other
    (the survivor keeps its exact position, so vertices stay on the
    extracted isosurface); caps get their long edge flipped.  Operations that
    would pinch the surface, fold a triangle over or worsen quality are
    skipped, so a closed, consistently oriented mesh stays that way.
    """
    if mesh.is_empty:
        return mesh
    em = _EditableMesh(mesh)
    for _ in range(max_rounds):
        live = np.flatnonzero(em.alive)
        asp = TriangleMesh(em.v, em.t[live]).aspect_ratios()
        bad = live[np.argsort(-asp)][: int(np.sum(asp > max_aspect))]
        if len(bad) == 0:
            break
        changed = 0
        for f in bad:
            if not em.alive[f]:
                continue
            tri = em.t[f]
            p = em.pts(tri)
            if _aspect(p) <= max_aspect:
                continue
            lens = [np.linalg.norm(p[(k + 1) % 3] - p[k]) for k in range(3)]
            k_short = int(np.argmin(lens))
            k_long = int(np.argmax(lens))
            u, w = int(tri[k_short]), int(tri[(k_short + 1) % 3])
            done = False
            if lens[k_short] < 0.5 * lens[k_long]:
                done = em.try_collapse(u, w, max_aspect) or em.try_collapse(w, u, max_aspect)
            if not done:
                done = em.try_flip(int(tri[k_long]), int(tri[(k_long + 1) % 3]), max_aspect)
            if not done:
                done = any(em.try_relocate(int(x), max_aspect) for x in tri)
            changed += done
        if changed == 0:
            break
    tris = em.t[em.alive]
    used = np.unique(tris)
    remap = np.full(len(em.v), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(em.v[used], remap[tris])
