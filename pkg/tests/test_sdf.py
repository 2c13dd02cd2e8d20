import numpy as np
import pytest

from bladeforge.blades import sample_params, synthesize_cloud
from bladeforge.errors import GeometryError, SamplingError
from bladeforge.geom import PointCloud, normalize_to_unit_cube
from bladeforge.kdtree import KdTree
from bladeforge.sdf import SdfSampleSet, build_field, evaluate, generate_samples

from conftest import fibonacci_sphere, sphere_points


@pytest.fixture(scope="module")
def unit_sphere():
    return build_field(fibonacci_sphere(20_000))


def _spacing(pts):
    d, _ = KdTree(pts).query(pts, k=2)
    return d[:, 1].mean()


def test_surface_subset_whole_sphere(unit_sphere):
    assert len(unit_sphere.surf_points) >= 0.99 * 20_000


def test_interior_points_excluded():
    surf = sphere_points(5000, seed=2)
    inner = sphere_points(500, r=0.5, seed=3)
    f = build_field(np.vstack([surf, inner]))
    assert f.surf_index.max() < 5000


def test_three_points_rejected():
    with pytest.raises(GeometryError):
        build_field(np.eye(3))


def test_tol_surf_too_small():
    with pytest.raises(GeometryError, match="tol_surf too small"):
        build_field(np.vstack([sphere_points(200), [[0, 0, 0]]]), tol_surf=-1.0)


def test_clamped_centre(unit_sphere):
    assert evaluate(unit_sphere, [0, 0, 0], 0.1) == -0.1


@pytest.mark.parametrize("z, s", [(0.95, -0.05), (1.02, 0.02)])
def test_analytic_points(unit_sphere, z, s):
    gap = 2 * _spacing(unit_sphere.surf_points)
    assert evaluate(unit_sphere, [0, 0, z], 0.1) == pytest.approx(s, abs=gap)


def _band_queries(r, n, seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (r + rng.uniform(-0.099, 0.099, n))[:, None]


def test_sphere_oracle_band():
    # evenly spread samples: the worst query stays inside twice the spacing
    r = 0.6
    field = build_field(np.vstack([fibonacci_sphere(50_000, r), sphere_points(10_000, r=0.5, seed=1)]))
    x = _band_queries(r, 1000, 5)
    err = np.abs(evaluate(field, x, 0.1) - (np.linalg.norm(x, axis=1) - r))
    assert err.max() <= 2 * _spacing(field.surf_points)


def test_sphere_oracle_random_cloud():
    # i.i.d. samples leave Poisson gaps, so only the bulk of queries meets the bound
    r = 0.6
    field = build_field(sphere_points(50_000, r=r, seed=4))
    x = _band_queries(r, 1000, 5)
    err = np.abs(evaluate(field, x, 0.1) - (np.linalg.norm(x, axis=1) - r))
    h = _spacing(field.surf_points)
    assert np.quantile(err, 0.99) <= 2 * h
    assert err.max() <= 3 * h


@pytest.mark.parametrize("shape", ["sphere", "box"])
def test_sign_matches_analytic(shape, rng):
    if shape == "sphere":
        pts = sphere_points(20_000, r=0.7, seed=6)
        sdf = lambda x: np.linalg.norm(x, axis=1) - 0.7
    else:
        g = rng.uniform(-0.5, 0.5, (30_000, 3))
        ax = rng.integers(0, 3, len(g))
        g[np.arange(len(g)), ax] = np.sign(g[np.arange(len(g)), ax]) * 0.5
        pts = np.vstack([g, [[x, y, z] for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5)]])
        sdf = lambda x: np.abs(x).max(axis=1) - 0.5
    field = build_field(pts)
    x = rng.uniform(-1, 1, (5000, 3))
    s = sdf(x)
    far = np.abs(s) > field.tol_sign + _spacing(field.surf_points)
    np.testing.assert_array_equal(field.sign(x[far]), np.sign(s[far]))


def test_band_count_and_clamp(unit_sphere):
    ss = generate_samples(unit_sphere, 20_000, 0.1, 0.5, rng_seed=1)
    assert len(ss) == 20_000
    assert np.sum(np.abs(ss.sdf) < 0.1) >= 9500
    assert np.abs(ss.sdf).max() <= 0.1
    assert ss.n_band == 10_000


def test_band_fraction_zero(unit_sphere):
    ss = generate_samples(unit_sphere, 1000, 0.1, 0.0, rng_seed=1)
    assert ss.n_band == 0
    assert unit_sphere.bbox.inflate(0.1).contains(ss.points).all()


def test_deterministic_and_roundtrip(unit_sphere, tmp_path):
    a = generate_samples(unit_sphere, 3000, rng_seed=9, design_id="x")
    b = generate_samples(unit_sphere, 3000, rng_seed=9, design_id="x")
    np.testing.assert_array_equal(a.points, b.points)
    a.save(tmp_path / "x.bin")
    c = SdfSampleSet.load(tmp_path / "x.bin")
    np.testing.assert_allclose(c.points, a.points, rtol=1e-6)
    assert c.design_id == "x" and c.delta == 0.1


def test_stall_reported(unit_sphere):
    with pytest.raises(SamplingError, match="stalled"):
        generate_samples(unit_sphere, 200, delta=1e-9, noise_std=1.0, max_budget=2)


def test_bad_arguments(unit_sphere):
    for kw in ({"n": 0}, {"band_fraction": 1.5}, {"delta": 0.0}):
        with pytest.raises(ValueError):
            generate_samples(unit_sphere, **{"n": 10, **kw})


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_blade_band_balance(seed):
    cloud, _, _ = normalize_to_unit_cube(synthesize_cloud(sample_params(seed), 6000, 3000))
    field = build_field(cloud)
    ss = generate_samples(field, 4000, rng_seed=seed)
    band = ss.sdf[: ss.n_band]
    assert 0.3 <= np.mean(band < 0) <= 0.7
    assert np.abs(ss.points).max() <= 1.1 + 1e-12
