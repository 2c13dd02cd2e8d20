import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from bladeforge.decoder import LatentTable
from bladeforge.meshing import TriangleMesh, marching_cubes, sample_grid
from bladeforge.metrics import (DistanceReport, distance_report, histogram_summary, nrmse_per_dim,
                                point_mesh_distance, point_triangle_distance, read_distance_csv,
                                section_extent_ratio, surface_distance, write_distance_csv)

from conftest import fibonacci_sphere


def _sphere_mesh(r, res=48):
    return marching_cubes(sample_grid(lambda x: np.linalg.norm(x, axis=1) - r, None, res, -1.2, 1.2))


def _dense_point_triangle(p, a, b, c, n=300):
    # oracle: minimum over a fine barycentric lattice
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    keep = u + v <= 1
    q = a + u[keep][:, None] * (b - a) + v[keep][:, None] * (c - a)
    return np.linalg.norm(q - p, axis=1).min()


def test_identical_surfaces_zero():
    tet = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
                       np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))
    assert surface_distance(tet.vertices, tet, exact=True) == 0.0


def test_inflated_sphere():
    mesh = _sphere_mesh(1.05)
    d = surface_distance(fibonacci_sphere(2000), mesh, 100_000)
    assert d == pytest.approx(0.05, abs=2 * np.sqrt(mesh.area() / 100_000))


def test_directed():
    full = _sphere_mesh(0.5, 32)
    cap_tris = full.triangles[np.all(full.vertices[full.triangles][:, :, 2] > 0.3, axis=1)]
    cap = TriangleMesh(full.vertices, cap_tris)
    cap_pts = cap.sample_surface(2000, np.random.default_rng(0))
    full_pts = full.sample_surface(2000, np.random.default_rng(0))
    assert surface_distance(cap_pts, full) < 0.01
    assert surface_distance(full_pts, cap) > 0.2


def test_monotone_in_radius():
    ref = fibonacci_sphere(1000)
    d = [surface_distance(ref, _sphere_mesh(r, 40), 50_000) for r in (1.0, 1.03, 1.06, 1.1)]
    assert np.all(np.diff(d) > 0)


def test_empty_mesh_rejected():
    with pytest.raises(ValueError, match="no predicted surface"):
        surface_distance(np.zeros((3, 3)), TriangleMesh(np.empty((0, 3)), np.empty((0, 3))))


def test_point_triangle_matches_dense_oracle(rng):
    a, b, c = rng.normal(size=(3, 3))
    p = rng.normal(size=(40, 3)) * 2
    exact = point_triangle_distance(p, np.tile(a, (40, 1)), np.tile(b, (40, 1)), np.tile(c, (40, 1)))
    oracle = np.array([_dense_point_triangle(q, a, b, c) for q in p])
    step = max(np.linalg.norm(b - a), np.linalg.norm(c - a)) / 299
    assert np.all(exact <= oracle + 1e-12)
    assert np.all(oracle - exact <= step)


def test_double_loop_equivalence(rng):
    mesh = _sphere_mesh(0.7, 12)
    ref = rng.normal(size=(200, 3))
    samples = mesh.sample_surface(500, np.random.default_rng(1))
    brute = np.mean([min(np.linalg.norm(x - y) for y in samples) for x in ref])
    assert surface_distance(ref, mesh, 500, seed=1) == pytest.approx(brute, abs=1e-12)
    loop = np.mean([min(point_triangle_distance(x[None], *[m[i][None] for m in mesh.corners()])[0]
                        for i in range(len(mesh.triangles))) for x in ref[:40]])
    assert point_mesh_distance(ref[:40], mesh).mean() == pytest.approx(loop, abs=1e-12)


@settings(max_examples=15)
@given(st.integers(0, 1000))
def test_rigid_invariance(seed):
    rng = np.random.default_rng(seed)
    mesh = _sphere_mesh(0.6, 16)
    mesh = TriangleMesh(mesh.vertices * [1.0, 0.5, 1.4], mesh.triangles)
    ref = rng.normal(size=(100, 3))
    R = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3) * 5
    moved = TriangleMesh(mesh.vertices @ R.T + t, mesh.triangles)
    for exact in (False, True):
        a = surface_distance(ref, mesh, 5000, seed=3, exact=exact)
        b = surface_distance(ref @ R.T + t, moved, 5000, seed=3, exact=exact)
        assert abs(a - b) <= 1e-9


def test_report_roundtrip(tmp_path):
    mesh = _sphere_mesh(0.5, 24)
    rep = distance_report("0001", fibonacci_sphere(300, 0.5), mesh, n_pred_samples=20_000)
    assert rep.relative == pytest.approx(rep.mean_directed_distance / 1.0, rel=1e-2)
    write_distance_csv(tmp_path / "d.csv", [rep])
    assert read_distance_csv(tmp_path / "d.csv") == [rep]
    with pytest.raises(ValueError):
        DistanceReport("x", -1.0, 1, 1.0)


def test_histogram_summary():
    h = histogram_summary([0.0, 1.0, 1.0, 2.0], bins=2)
    assert h["counts"] == [1, 3] and h["median"] == 1.0


def test_nrmse_zero_and_offset(rng):
    t = rng.normal(size=(20, 5))
    assert np.all(nrmse_per_dim(t, t)[0] == 0)
    per, mean = nrmse_per_dim(t, t + 0.1 * np.ptp(t, axis=0))
    np.testing.assert_allclose(per, 10.0)
    assert mean == pytest.approx(10.0)


def test_nrmse_spreadsheet(rng):
    t = rng.normal(size=(10, 4))
    p = t + rng.normal(scale=0.2, size=t.shape)
    expect = []
    for d in range(4):
        sq = sum((p[i][d] - t[i][d]) ** 2 for i in range(10)) / 10
        expect.append(100 * sq ** 0.5 / (max(t[:, d]) - min(t[:, d])))
    np.testing.assert_allclose(nrmse_per_dim(t, p)[0], expect, rtol=1e-12)
    std = nrmse_per_dim(t, p, norm="std")[0]
    np.testing.assert_allclose(std, np.sqrt(np.mean((p - t) ** 2, 0)) / t.std(0, ddof=1) * 100)


def test_nrmse_tables_align_by_id(rng):
    c = rng.normal(size=(3, 2))
    truth = LatentTable(["a", "b", "c"], c)
    pred = LatentTable(["c", "a", "b"], c[[2, 0, 1]])
    assert nrmse_per_dim(truth, pred)[1] == 0.0
    with pytest.raises(ValueError):
        nrmse_per_dim(truth, LatentTable(["a", "b", "d"], c))


def test_nrmse_constant_dim_warns(rng):
    t = np.column_stack([rng.normal(size=6), np.ones(6)])
    with pytest.warns(RuntimeWarning):
        per, mean = nrmse_per_dim(t, t + 0.5)
    assert np.isnan(per[1]) and mean == pytest.approx(100 * 0.5 / np.ptp(t[:, 0]))


def test_section_extent_ratio():
    z = np.linspace(0, 1, 200)
    top_w = 0.3
    x = np.concatenate([np.ones(200) * (1 - z * (1 - top_w)), -np.ones(200) * (1 - z * (1 - top_w))])
    v = np.column_stack([x, np.zeros(400), np.concatenate([z, z])])
    assert section_extent_ratio(v, frac=0.01) == pytest.approx(top_w, rel=0.02)
