"""File formats: PLY/CSV clouds, OBJ/STL meshes, SDF sample records, latent tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, points, binary: bool = False):
    pts = np.asarray(points, dtype=np.float64)
    fmt = "binary_little_endian" if binary else "ascii"
    ptype = "float" if binary else "double"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
              f"property {ptype} x\nproperty {ptype} y\nproperty {ptype} z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f4").tobytes())
        else:
            np.savetxt(fh, pts, fmt="%.17g")


def read_ply(path) -> np.ndarray:
    """Vertex x, y, z of an ASCII or binary little-endian PLY file."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1][2].append((tok[4], None))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: first element must be 'vertex'")
    name, count, props = elements[0]
    names = [p[0] for p in props]
    if any(p[1] is None for p in props):
        raise ValueError(f"{path}: list properties on vertices are not supported")
    cols = [names.index(c) for c in ("x", "y", "z")]
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii").split("\n")[:count]
        table = np.loadtxt(text, ndmin=2)
        return table[:, cols].astype(np.float64)
    if fmt == "binary_little_endian":
        dt = np.dtype([(n, "<" + t) for n, t in props])
        table = np.frombuffer(raw, dtype=dt, count=count, offset=body_start)
        return np.column_stack([table[c].astype(np.float64) for c in ("x", "y", "z")])
    raise ValueError(f"{path}: unsupported PLY format {fmt!r}")


def write_xyz_csv(path, points):
    np.savetxt(path, np.asarray(points, dtype=np.float64), delimiter=",",
               header="x,y,z", comments="", fmt="%.17g")


def read_xyz_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)


def read_cloud(path) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return read_xyz_csv(p)
    return read_ply(p)


# -- meshes ---------------------------------------------------------------

def write_obj(path, vertices, triangles):
    with open(path, "w") as fh:
        for v in np.asarray(vertices):
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in np.asarray(triangles) + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def read_obj(path):
    verts, tris = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            # fan-triangulate polygons
            for k in range(1, len(idx) - 1):
                tris.append([idx[0] - 1, idx[k] - 1, idx[k + 1] - 1])
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def write_stl(path, vertices, triangles):
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    tri = v[t]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1)
    n[norm > 0] /= norm[norm > 0, None]
    rec = np.zeros(len(t), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    rec["n"] = n
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(b"bladeforge binary STL".ljust(80, b" "))
        fh.write(np.uint32(len(t)).astype("<u4").tobytes())
        fh.write(rec.tobytes())


def read_stl(path):
    """Binary STL; returns unwelded ``(vertices, triangles)``."""
    raw = Path(path).read_bytes()
    count = int(np.frombuffer(raw, dtype="<u4", count=1, offset=80)[0])
    rec = np.frombuffer(raw, dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")],
                        count=count, offset=84)
    verts = rec["v"].reshape(-1, 3).astype(np.float64)
    return verts, np.arange(len(verts)).reshape(-1, 3)


# -- SDF sample records ---------------------------------------------------

def write_samples(path, xyz, s, meta: dict):
    """Little-endian f32 records ``x y z s`` plus a JSON sidecar next to them."""
    path = Path(path)
    rec = np.column_stack([np.asarray(xyz), np.asarray(s)]).astype("<f4")
    path.write_bytes(rec.tobytes())
    side = dict(meta)
    side["n"] = int(len(rec))
    sidecar_path(path).write_text(json.dumps(side, indent=2))


def read_samples(path):
    path = Path(path)
    rec = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(-1, 4).astype(np.float64)
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("n", len(rec)) != len(rec):
        raise ValueError(f"{path}: sidecar says {meta['n']} samples, file has {len(rec)}")
    return rec[:, :3], rec[:, 3], meta


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


# -- latent tables --------------------------------------------------------

def write_latents(path, design_ids, codes):
    codes = np.asarray(codes, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["design_id"] + [f"z{d}" for d in range(codes.shape[1])])
        for did, row in zip(design_ids, codes):
            w.writerow([did] + [repr(float(v)) for v in row])


def read_latents(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [r[0] for r in rows[1:]]
    codes = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return ids, codes.reshape(len(ids), len(rows[0]) - 1)
