import numpy as np
import pytest
from hypothesis import given, strategies as st

from bladeforge.blades import (BLADE_HEIGHT, PARAM_RANGES, BladeParams, BladeSolid, build_profile,
                               generate_dataset, load_manifest, sample_params, synthesize_cloud)
from bladeforge.errors import GeometryError
from bladeforge.hull import build_hull, violation_margin


def _params(**kw):
    base = dict(bld=2.0, bsd=1.0, bcd=4.0, bbr=30.0, btr=30.0, k1=0.5, k2=0.5, k3=0.5, lr=10.0, tr=10.0)
    base.update(kw)
    return BladeParams(**base)


def _polygon_is_simple(p):
    # convex + counter-clockwise: every turn is a left turn
    e = np.roll(p, -1, axis=0) - p
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    return np.all(cross > -1e-12)


@given(st.integers(0, 2**32 - 1))
def test_draws_in_table(seed):
    p = sample_params(seed)
    assert p.in_table_range()
    assert min(p.ld, p.sd, p.cd) > 0
    assert sample_params(seed) == p


def test_k1_coverage():
    k1 = np.array([sample_params(s).k1 for s in range(10_000)])
    assert k1.min() >= 0.2 and k1.max() <= 0.8
    assert (k1.max() - k1.min()) >= 0.95 * 0.6


def test_stadium_chord():
    p = build_profile(1.0, 1.0, 2.0)
    assert np.ptp(p[:, 0]) == pytest.approx(3.0, rel=1e-3)
    assert np.ptp(p[:, 1]) == pytest.approx(1.0, rel=1e-3)


def test_two_circle_chord():
    # 1 (left radius) + 4 (centre distance) + 0.5 (right radius)
    p = build_profile(2.0, 1.0, 4.0)
    assert p.shape == (256, 2)
    assert np.ptp(p[:, 0]) == pytest.approx(5.5, rel=1e-3)
    assert _polygon_is_simple(p)


def test_coincident_centres_give_larger_circle():
    p = build_profile(2.0, 1.0, 0.0)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0)


def test_nested_circles_rejected():
    with pytest.raises(GeometryError):
        build_profile(2.0, 0.5, 0.3)


def _seg_dist(p, a, b):
    t = np.clip((p - a) @ (b - a) / np.dot(b - a, b - a), 0, 1)
    return np.linalg.norm(p - (a + t[:, None] * (b - a)), axis=1)


@given(st.floats(0.5, 2), st.floats(0.2, 1), st.floats(2, 4))
def test_profiles_convex_and_on_hull(ld, sd, cd):
    p = build_profile(ld, sd, cd)
    assert _polygon_is_simple(p)
    # hand geometry: every vertex sits on an arc or on one of the two outer tangents
    r1, r2 = ld / 2, sd / 2
    phi = np.arccos((r1 - r2) / cd)
    d = [np.abs(np.linalg.norm(p, axis=1) - r1), np.abs(np.linalg.norm(p - [cd, 0], axis=1) - r2)]
    for sgn in (1, -1):
        u = np.array([np.cos(phi), sgn * np.sin(phi)])
        d.append(_seg_dist(p, r1 * u, np.array([cd, 0]) + r2 * u))
    assert np.min(d, axis=0).max() < 1e-9


def test_top_not_larger_than_bottom():
    s = BladeSolid.from_params(_params())
    assert np.all(np.ptp(s.top_profile, axis=0) <= np.ptp(s.bottom_profile, axis=0))


def test_prismatic_limit():
    s = BladeSolid.from_params(_params(k1=1.0, k2=1.0, k3=1.0))
    np.testing.assert_allclose(s.top_profile, s.bottom_profile)
    with pytest.raises(GeometryError):
        BladeSolid.from_params(_params(k1=1.0, k2=1.0, k3=1.0), strict=True)


def test_uniform_taper_measured_on_cloud():
    # with all three scale factors at 0.2 the top section is the bottom shrunk by 0.2
    cloud = synthesize_cloud(_params(k1=0.2, k2=0.2, k3=0.2), 30_000, 1000)
    pts = cloud.points[:30_000]
    top = pts[pts[:, 2] > BLADE_HEIGHT - 0.05]
    bot = pts[pts[:, 2] < 0.05]
    ratio = np.ptp(top[:, 0]) / np.ptp(bot[:, 0])
    assert ratio == pytest.approx(0.2, rel=0.03)


def test_cloud_counts_and_determinism():
    p = _params(seed=7)
    a = synthesize_cloud(p, 5000, 5000)
    assert len(a.points) == 10_000 and a.meta["n_surface"] == 5000
    np.testing.assert_array_equal(a.points, synthesize_cloud(p, 5000, 5000).points)


def test_interior_inside_surface_hull():
    p = sample_params(11)
    c = synthesize_cloud(p, 4000, 4000)
    h = build_hull(c.points[:4000])
    assert violation_margin(h, c.points[4000:]).max() <= 1e-6 * p.height


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_linear_loft(seed):
    s = BladeSolid.from_params(sample_params(seed))
    hull = build_hull(s.corner_points())
    # slice the hull at height t*H by intersecting edges, then compare extents
    for t in (0.25, 0.5, 0.75):
        z = t * s.height
        v = hull.vertices
        pts = []
        for f in hull.faces:
            for i in range(3):
                a, b = v[f[i]], v[f[(i + 1) % 3]]
                if (a[2] - z) * (b[2] - z) < 0:
                    pts.append(a + (z - a[2]) / (b[2] - a[2]) * (b - a))
        chord = np.ptp(np.array(pts)[:, 0])
        assert chord == pytest.approx(s.section(t)[0], rel=0.01)


def test_dataset_deterministic(tmp_path):
    m1 = generate_dataset(tmp_path / "a", n_train=2, n_test=1, seed=5, n_surface=200, n_interior=100)
    m2 = generate_dataset(tmp_path / "b", n_train=2, n_test=1, seed=5, n_surface=200, n_interior=100)
    assert m1 == m2
    assert load_manifest(tmp_path / "a")["designs"][2]["split"] == "test"
    a = (tmp_path / "a" / "design_0001.ply").read_bytes()
    assert a == (tmp_path / "b" / "design_0001.ply").read_bytes()


def test_table_ranges_exact():
    assert PARAM_RANGES["k1"] == (0.2, 0.8) and PARAM_RANGES["bcd"] == (2.0, 4.0)
