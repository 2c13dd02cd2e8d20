import dataclasses
import warnings

import numpy as np
import pytest

from bladeforge.blades import sample_params
from bladeforge.condmap import (CondConfig, CondModel, _mse_backward, conditional_generate, predict_code,
                                read_strains, surrogate_strains, train_cond, write_strains)
from bladeforge.decoder import DecoderModel

from gradcheck import central_diff, min_preactivation, rel_err


def cond_gradient_errors(n_configs=100):
    """Worst relative error per random 2x16 conditional map (MSE loss)."""
    errs = []
    for seed in range(n_configs):
        k = 0
        while True:
            rng = np.random.default_rng([seed, k])
            k += 1
            model = CondModel(6, hidden=16, n_hidden=2, seed=seed)
            x = rng.normal(size=(10, 3))
            z = rng.normal(size=(10, 6))
            _, cache = model.net.forward(x)
            if min_preactivation(cache) > 1e-3:
                break
        _, grads, _ = _mse_backward(model, x, z)
        num = central_diff(lambda: float(np.mean((model.net.forward(x)[0] - z) ** 2)), model.net.params())
        errs.append(max(rel_err(g, n) for g, n in zip(grads, num)))
    return np.array(errs)


def test_gradients_match_finite_differences():
    assert cond_gradient_errors(25).max() <= 1e-4


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    eps = rng.uniform(0.5e-3, 2e-3, (20, 3))
    codes = np.column_stack([np.sin(3e3 * eps[:, 0]), eps[:, 1] * 500, eps.sum(1) * 100, np.zeros(20)])
    return eps, codes


def test_standardization_absorbs_scaling(toy):
    eps, codes = toy
    cfg = CondConfig(hidden=32, epochs=300, log_every=50)
    m1, _ = train_cond(eps, codes, cfg)
    scale = np.array([1e3, 0.5, 7.0])
    m2, _ = train_cond(eps * scale, codes, cfg)
    q = np.random.default_rng(1).uniform(0.6e-3, 1.9e-3, (15, 3))
    np.testing.assert_allclose(m1(q), m2(q * scale), atol=1e-6)


def test_curve_decreases(toy):
    eps, codes = toy
    with pytest.warns(RuntimeWarning):  # the constant code column has no range
        from bladeforge.metrics import nrmse_per_dim
        nrmse_per_dim(codes, codes)
    _, curve = train_cond(eps, codes, CondConfig(hidden=32, epochs=2000, log_every=100))
    assert len(curve) == 20 and curve[-1] < 0.25 * curve[0]


def test_single_pair_fits():
    eps = np.array([[1e-3, 2e-3, 0.5e-3]])
    z = np.array([[0.3, -0.2, 0.1]])
    m, curve = train_cond(eps, z, CondConfig(hidden=16, epochs=3000, log_every=100))
    np.testing.assert_allclose(m(eps), z, atol=1e-3)
    assert curve[-1] < curve[0]


def test_outside_range_warns(toy):
    eps, codes = toy
    m, _ = train_cond(eps, codes, CondConfig(hidden=8, epochs=5))
    with pytest.warns(RuntimeWarning, match="outside the training range"):
        predict_code(m, eps.max(axis=0) * 2)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert predict_code(m, eps[3]).shape == (4,)


def test_save_load(tmp_path, toy):
    eps, codes = toy
    m, _ = train_cond(eps, codes, CondConfig(hidden=8, epochs=20))
    m.save(tmp_path)
    back = CondModel.load(tmp_path)
    np.testing.assert_allclose(back(eps), m(eps), atol=1e-5)
    np.testing.assert_array_equal(back.in_max, m.in_max)


def test_decoder_untouched_by_conditioning(toy):
    eps, codes = toy
    m, _ = train_cond(eps, codes, CondConfig(hidden=8, epochs=20))
    dec = DecoderModel(4, 2, 16, seed=1).eval()
    before = dec.weights_hash()
    try:
        conditional_generate(m, dec, eps[0], res=16)
    except ValueError as e:
        assert "left manifold" in str(e)
    assert dec.weights_hash() == before


def test_bad_inputs():
    with pytest.raises(ValueError):
        train_cond(np.zeros((3, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        CondConfig(lr=0).validate()
    with pytest.raises(ValueError):
        CondConfig.from_dict({"epoch": 3})


def test_surrogate_trend():
    p = sample_params(3)
    base = [surrogate_strains(dataclasses.replace(p, k1=k), noise=0.0) for k in (0.2, 0.5, 0.8)]
    assert np.all(np.diff(np.array(base), axis=0) < 0)
    base = [surrogate_strains(dataclasses.replace(p, k3=k), noise=0.0) for k in (0.2, 0.5, 0.8)]
    assert np.all(np.diff(np.array(base), axis=0) < 0)
    noisy = np.array([surrogate_strains(p, noise=0.05, seed=s) for s in range(2000)])
    clean = surrogate_strains(p, noise=0.0)
    np.testing.assert_allclose(noisy.std(0) / clean, 0.05, rtol=0.1)
    np.testing.assert_array_equal(surrogate_strains(p, seed=4), surrogate_strains(p, seed=4))


def test_strain_csv(tmp_path):
    eps = np.array([[1e-3, 2e-3, 3e-3], [4e-4, 5e-4, 6e-4]])
    write_strains(tmp_path / "s.csv", ["a", "b"], eps)
    ids, back = read_strains(tmp_path / "s.csv")
    assert ids == ["a", "b"]
    np.testing.assert_array_equal(back, eps)
    (tmp_path / "bad.csv").write_text("design_id,eps_x\na,1\n")
    with pytest.raises(ValueError):
        read_strains(tmp_path / "bad.csv")
