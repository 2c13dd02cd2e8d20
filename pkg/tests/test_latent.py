import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bladeforge.latent import (DiagonalGaussian, PcaBasis, best_aligned_axis, blend, fit_pca, interpolate,
                               marginal_stats, sample_codes, spearman, traverse)

vals = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_collinear_codes():
    t = np.linspace(-1, 1, 9)
    b = fit_pca(np.column_stack([t, 2 * t]))
    np.testing.assert_allclose(b.components[0], np.array([1, 2]) / np.sqrt(5), atol=1e-12)
    assert b.explained_ratio[0] == pytest.approx(1.0)


def test_isotropic_shares(rng):
    b = fit_pca(rng.normal(size=(10_000, 4)))
    np.testing.assert_allclose(b.explained_ratio, 0.25, atol=0.02)


def test_truncation(rng):
    b = fit_pca(rng.normal(size=(3, 10)), n_components=8)
    assert b.n_components == 3
    with pytest.raises(ValueError):
        fit_pca(np.ones((1, 3)))


@given(arrays(np.float64, (12, 5), elements=vals))
def test_pca_invariants(codes):
    b = fit_pca(codes)
    C = b.components
    np.testing.assert_allclose(C @ C.T, np.eye(len(C)), atol=1e-8)
    assert np.all(np.diff(b.explained_variance) <= 1e-12)
    np.testing.assert_allclose(b.reconstruct(b.project(codes)), codes, atol=1e-8)
    cov = np.cov(b.project(codes), rowvar=False)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() <= 1e-6 * max(np.diag(cov).max(), 1e-300) + 1e-12
    # sign convention: the largest-magnitude entry is positive
    assert np.all(C[np.arange(len(C)), np.argmax(np.abs(C), axis=1)] > 0)


def test_save_load(tmp_path, rng):
    b = fit_pca(rng.normal(size=(30, 6)))
    b.save(tmp_path / "pca.json")
    c = PcaBasis.load(tmp_path / "pca.json")
    np.testing.assert_allclose(c.components, b.components)
    np.testing.assert_allclose(c.explained_variance, b.explained_variance)


def test_traverse(rng):
    b = fit_pca(rng.normal(size=(30, 6)))
    out = traverse(b, 1, [-2.0, 0.0, 2.0])
    np.testing.assert_allclose(out[1], b.mean)
    np.testing.assert_allclose(out[0] + out[2], 2 * b.mean)
    with pytest.raises(ValueError):
        traverse(b, 6, [0.0])


def test_marginals(rng):
    codes = np.column_stack([rng.normal(0, np.sqrt(0.1), 10_000), np.full(10_000, 3.0)])
    m = marginal_stats(codes, bins=20)
    assert m[0].variance == pytest.approx(0.1, abs=0.01)
    assert m[1].variance == 0.0 and m[1].skewness == 0.0
    assert m[0].counts.sum() == 10_000 and len(m[0].bin_edges) == 21
    assert [x.dim for x in marginal_stats(rng.normal(size=(5, 201)), dims=[50, 100, 150, 200])] == [50, 100, 150, 200]


def test_interpolation_examples():
    a, b = np.array([0.0, 2.0]), np.array([4.0, -2.0])
    out = interpolate(a, b, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(out, [a, [2.0, 0.0], b])
    np.testing.assert_allclose(blend([a, b, [1.0, 3.0]], [1 / 3] * 3), [5 / 3, 1.0])
    with pytest.raises(ValueError):
        blend([a, b], [0.7, 0.4])
    with pytest.raises(ValueError):
        blend([a, b], [1.2, -0.2])
    with pytest.raises(ValueError):
        interpolate(a, np.zeros(3), [0.5])


@given(arrays(np.float64, (2, 4), elements=vals), arrays(np.float64, (4, 4), elements=vals),
       arrays(np.float64, 4, elements=vals), st.lists(st.floats(-1, 2), min_size=1, max_size=5))
def test_interpolation_affine_equivariance(ends, A, t, alphas):
    za, zb = ends
    lhs = interpolate(za @ A.T + t, zb @ A.T + t, alphas)
    rhs = interpolate(za, zb, alphas) @ A.T + t
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


def test_sampling(rng):
    g = DiagonalGaussian(np.array([0.5, -1.0, 0.0]), np.array([0.3, 1.2, 0.0]))
    s = sample_codes(g, 10_000, seed=4)
    np.testing.assert_allclose(s.std(axis=0, ddof=1)[:2], g.sigma[:2], rtol=0.03)
    np.testing.assert_array_equal(s[:, 2], 0.0)
    np.testing.assert_array_equal(sample_codes(g, 5, seed=1, temperature=0.0), np.tile(g.mu, (5, 1)))
    np.testing.assert_array_equal(sample_codes(g, 5, seed=1), sample_codes(g, 5, seed=1))
    back = DiagonalGaussian.fit(s)
    np.testing.assert_allclose(back.mu, g.mu, atol=4 * g.sigma.max() / 100)
    np.testing.assert_allclose(back.sigma, g.sigma, rtol=0.03, atol=1e-12)
    assert DiagonalGaussian.from_dict(g.to_dict()).sigma.tolist() == g.sigma.tolist()


def test_gaussian_validation():
    with pytest.raises(ValueError):
        DiagonalGaussian(np.zeros(2), np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        DiagonalGaussian(np.zeros(2), np.ones(2), temperature=0.0)


def test_best_aligned_axis(rng):
    latent = rng.normal(size=(50, 6)) * [0.1, 3.0, 0.2, 0.1, 0.1, 0.1]
    target = np.exp(latent[:, 1])
    b = fit_pca(latent)
    axis, rho = best_aligned_axis(b, latent, target)
    assert axis == 0 and abs(rho) > 0.95
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
