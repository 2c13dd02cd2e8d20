import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bladeforge.errors import GeometryError
from bladeforge.hull import _margin_kernel, _margin_numpy, build_hull, violation_margin

from conftest import cube_corners, sphere_points

coords = st.floats(-5, 5, allow_nan=False, allow_infinity=False, width=32)


def test_cube_hull():
    h = build_hull(cube_corners())
    assert len(h.vertices) == 8 and h.n_faces == 12
    np.testing.assert_allclose(h.face_offsets, 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(h.face_normals, axis=1), 1.0, atol=1e-9)


def test_interior_point_not_a_vertex():
    h = build_hull(np.vstack([cube_corners(), [[0, 0, 0]]]))
    assert len(h.vertices) == 8 and 8 not in h.source_index


@pytest.mark.parametrize("x, m", [((0, 0, 0), -1.0), ((2, 0, 0), 1.0), ((1, 1, 1), 0.0)])
def test_cube_margins(x, m):
    assert violation_margin(build_hull(cube_corners()), x) == pytest.approx(m, abs=1e-9)


def test_sphere_offsets_oracle():
    pts = sphere_points(1000, seed=3)
    h = build_hull(pts)
    assert np.all((h.face_offsets > 0.9) & (h.face_offsets <= 1.0 + 1e-12))
    # brute-force half-space oracle: every input point on the inner side of every face
    lhs = pts @ h.face_normals.T - h.face_offsets
    assert lhs.max() <= 1e-9


@pytest.mark.parametrize("pts", [np.zeros((3, 3)), np.random.default_rng(0).normal(size=(50, 3)) * [1, 1, 0]])
def test_degenerate_rejected(pts):
    with pytest.raises(GeometryError, match="degenerate hull"):
        build_hull(pts)


def test_kernel_matches_numpy(rng):
    h = build_hull(sphere_points(3000, seed=1) * [1.0, 0.4, 2.0])
    q = rng.uniform(-2.5, 2.5, (5000, 3))
    ref = _margin_numpy(q, h.face_normals, h.face_offsets)
    out = np.empty(len(q))
    b = h.bins
    _margin_kernel(q, h.face_normals, h.face_offsets, b.origin, b.ptr, b.order, b.axis, b.radius,
                   b.min_height, out)
    np.testing.assert_allclose(out, ref, atol=1e-12)
    np.testing.assert_allclose(violation_margin(h, q), ref, atol=1e-12)


@given(arrays(np.float32, (30, 3), elements=coords))
def test_containment_and_outward(pts):
    pts = pts.astype(np.float64)
    try:
        h = build_hull(pts)
    except GeometryError:
        return
    assert h.n_faces >= 4
    assert violation_margin(h, pts).max() <= 1e-9
    lhs = h.vertices @ h.face_normals.T - h.face_offsets
    assert lhs.max() <= 1e-9


@given(arrays(np.float32, (15, 3), elements=coords), arrays(np.float32, (10, 3), elements=coords))
def test_sign_symmetry(pts, q):
    pts = np.vstack([pts, -pts]).astype(np.float64)
    try:
        h = build_hull(pts)
    except GeometryError:
        return
    q = q.astype(np.float64)
    np.testing.assert_allclose(violation_margin(h, q), violation_margin(h, -q), atol=1e-9)
