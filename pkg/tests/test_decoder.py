import numpy as np
import pytest

from bladeforge.decoder import (Batch, DecoderModel, LatentTable, TrainConfig, backward, infer_latent,
                                load_checkpoint, loss_joint, read_loss_curve, save_checkpoint, train)
from bladeforge.nn import Mlp, RowAdam, step_lr
from bladeforge.sdf import SdfSampleSet, build_field, generate_samples

from conftest import sphere_points
from gradcheck import central_diff, min_preactivation, rel_err


def _config(seed, k):
    rng = np.random.default_rng([seed, k])
    m = DecoderModel(4, 2, 8, dropout_p=0.2, seed=seed, dtype=np.float64, out_scale=1.0).train()
    lat = LatentTable(["a", "b", "c"], rng.normal(0, 0.5, (3, 4)))
    b = Batch(rng.integers(0, 3, 16), rng.uniform(-1, 1, (16, 3)), rng.uniform(-0.1, 0.1, 16))
    return m, lat, b


def _kink_gap(m, lat, b, delta):
    pred, cache = m.forward(lat.codes[b.design_idx], b.points, np.random.default_rng(99), update_stats=False)
    return min(min_preactivation(cache), np.abs(np.clip(pred, -delta, delta) - b.sdf).min(),
               np.abs(np.abs(pred) - delta).min())


def decoder_gradient_errors(n_configs=100):
    """Worst relative error per random 2x8 decoder (training mode: batch norm and dropout on)."""
    cfg = TrainConfig(latent_dim=4, n_layers=2, width=8, delta=0.1, lambda_z=1e-2, dtype="float64")
    errs = []
    for seed in range(n_configs):
        k = 0
        while True:  # keep clear of the ReLU, clamp and L1 kinks
            m, lat, b = _config(seed, k)
            k += 1
            if _kink_gap(m, lat, b, cfg.delta) > 1e-3:
                break
        f = lambda: loss_joint(m, lat, b, cfg, rng=np.random.default_rng(99))
        _, grads, rows, gz = backward(m, lat, b, cfg, rng=np.random.default_rng(99))
        num = central_diff(f, m.net.params() + [lat.codes])
        full = np.zeros_like(lat.codes)
        full[rows] = gz
        errs.append(max([rel_err(g, n) for g, n in zip(grads, num[:-1])] + [rel_err(full, num[-1])]))
    return np.array(errs)


def test_gradients_match_finite_differences():
    assert decoder_gradient_errors(25).max() <= 1e-4


def test_eval_mode_input_gradient(rng):
    net = Mlp(5, [8, 8], 1, dtype=np.float64, seed=3).eval()
    for layer in net.layers[:-1]:
        layer["running_var"] = rng.uniform(0.5, 2, layer["running_var"].shape)
        layer["running_mean"] = rng.normal(0, 0.3, layer["running_mean"].shape)
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(6, 1))
    out, cache = net.forward(x)
    _, dx = net.backward(cache, w)
    num = central_diff(lambda: float(np.sum(net.forward(x)[0] * w)), [x])[0]
    assert rel_err(dx, num) <= 1e-6


def test_lipschitz_bound(rng):
    m = DecoderModel(8, 3, 32, seed=2, dtype=np.float64).eval()
    L = np.prod([np.linalg.norm(W, 2) for W, _ in m.net.fused_eval()])
    z = rng.normal(size=8)
    x = rng.uniform(-1, 1, (200, 3))
    dx = rng.normal(size=(200, 3))
    dx *= 1e-6 / np.linalg.norm(dx, axis=1, keepdims=True)
    diff = np.abs(m(z, x + dx) - m(z, x))
    assert np.all(diff <= L * 1e-6 * (1 + 1e-9))


def test_lr_schedule_boundary():
    assert step_lr(1e-3, 499, 500) == 1e-3
    assert step_lr(1e-3, 500, 500) == 5e-4
    assert step_lr(1e-3, 1500, 500) == 1.25e-4


def test_calibrated_statistics_match_data(rng):
    net = Mlp(4, [16, 16], 1, dtype=np.float64, seed=0, dropout_p=0.3)
    x = rng.normal(size=(5000, 4))
    net.calibrate_bn(x, chunk=777)
    net.eval()
    a0 = x @ net.layers[0]["W"] + net.layers[0]["b"]
    np.testing.assert_allclose(net.layers[0]["running_mean"], a0.mean(0), atol=1e-10)
    np.testing.assert_allclose(net.layers[0]["running_var"], a0.var(0, ddof=1), rtol=1e-9)
    L = net.layers[0]
    h = np.maximum((a0 - L["running_mean"]) / np.sqrt(L["running_var"] + 1e-5) * L["gamma"] + L["beta"], 0)
    a1 = h @ net.layers[1]["W"] + net.layers[1]["b"]
    np.testing.assert_allclose(net.layers[1]["running_mean"], a1.mean(0), atol=1e-10)
    assert np.all(net.layers[1]["running_var"] > 0)


def test_fused_field_matches_forward(rng):
    m = DecoderModel(6, 3, 16, seed=1, dtype=np.float32).eval()
    z = rng.normal(size=6)
    x = rng.uniform(-1, 1, (300, 3))
    np.testing.assert_allclose(m.field(z)(x), m(z, x), atol=1e-5)


def test_latent_table_validation():
    with pytest.raises(ValueError):
        LatentTable(["a"], np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        LatentTable(["a", "b"], np.zeros((1, 2)))


def test_config_validation():
    for bad in ({"lr0": 0}, {"dropout_p": 1.0}, {"delta": -1}, {"dtype": "int8"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"widht": 3})


@pytest.fixture(scope="module")
def sphere_set():
    field = build_field(sphere_points(8000, r=0.6, seed=0))
    return generate_samples(field, 4000, rng_seed=0, design_id="sphere")


def _tiny(**kw):
    base = dict(latent_dim=16, n_layers=4, width=64, epochs=150, batch_size=1024, dropout_p=0.0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_init(sphere_set):
    r = train([sphere_set], _tiny(epochs=0))
    assert r.loss_curve == [] and r.steps == 0 and r.model.mode == "eval"
    assert np.abs(r.latents.codes).max() < 0.1


def test_single_sphere_converges(sphere_set, tmp_path):
    r = train([sphere_set], _tiny(), checkpoint_dir=tmp_path)
    curve = r.loss_curve
    assert curve[-1] <= 0.10 * curve[0]
    assert r.steps == 150 * 4
    # over the last half the 10-epoch moving average trends down; Adam leaves
    # a few percent of epoch-to-epoch bumps, so the trend is what is checked
    ma = np.convolve(curve[len(curve) // 2:], np.ones(10) / 10, mode="valid")
    assert np.polyfit(np.arange(len(ma)), ma, 1)[0] <= 0
    assert ma[-1] <= ma[0]
    np.testing.assert_allclose(read_loss_curve(tmp_path), curve)

    # frozen decoder: fitting a code leaves the weights untouched
    before = r.model.weights_hash()
    z = infer_latent(r.model, sphere_set, _tiny(infer_steps=200))
    assert r.model.weights_hash() == before
    ref = r.latents.codes[0].astype(np.float64)
    fit = lambda c: np.mean(np.abs(np.clip(r.model(c, sphere_set.points), -0.1, 0.1) - sphere_set.sdf))
    assert fit(z) <= 1.5 * fit(ref) + 2e-3

    model, lat, cfg, manifest = load_checkpoint(tmp_path)
    assert manifest["weights_sha256"] == before == model.weights_hash()
    np.testing.assert_allclose(model(ref, sphere_set.points[:50]), r.model(ref, sphere_set.points[:50]))


@pytest.mark.xfail(reason="dropout noise in the training loss keeps the ratio near 0.2", strict=False)
def test_single_sphere_converges_with_dropout(sphere_set):
    r = train([sphere_set], _tiny(dropout_p=0.2))
    assert r.loss_curve[-1] <= 0.10 * r.loss_curve[0]


def test_deterministic(sphere_set):
    a = train([sphere_set], _tiny(epochs=3, dropout_p=0.2))
    b = train([sphere_set], _tiny(epochs=3, dropout_p=0.2))
    assert a.loss_curve == b.loss_curve
    assert a.model.weights_hash() == b.model.weights_hash()


def test_prior_pulls_codes_inward(sphere_set):
    two = [sphere_set, SdfSampleSet("copy", sphere_set.points, sphere_set.sdf)]
    free = train(two, _tiny(epochs=8, lambda_z=0.0, latent_init_std=0.5, lr0=1e-2))
    pulled = train(two, _tiny(epochs=8, lambda_z=10.0, latent_init_std=0.5, lr0=1e-2))
    assert np.linalg.norm(pulled.latents.codes) < 0.6 * np.linalg.norm(free.latents.codes)


def test_prior_gradient_and_decay(rng):
    # a vanishing clamp band removes the data term entirely
    cfg = TrainConfig(latent_dim=4, n_layers=2, width=8, delta=1e-12, lambda_z=0.5, dtype="float64")
    m = DecoderModel(4, 2, 8, dropout_p=0.0, dtype=np.float64, seed=0).train()
    lat = LatentTable(["a", "b", "c"], rng.normal(0, 0.5, (3, 4)))
    b = Batch(np.array([0, 2, 2, 0, 2]), rng.uniform(-1, 1, (5, 3)), np.zeros(5))
    _, _, rows, gz = backward(m, lat, b, cfg)
    np.testing.assert_array_equal(rows, [0, 2])
    np.testing.assert_allclose(gz, 2 * cfg.lambda_z * lat.codes[rows] / 2)
    opt = RowAdam(lat.codes)
    norms = []
    for _ in range(200):
        _, _, rows, gz = backward(m, lat, b, cfg)
        opt.step(rows, gz, 1e-3)
        norms.append(np.linalg.norm(lat.codes[rows]))
    assert np.all(np.diff(norms) < 0)


def test_infer_prior_limit_and_determinism(sphere_set):
    m = DecoderModel(16, 2, 16, seed=0).eval()
    z = infer_latent(m, sphere_set, _tiny(lambda_z=1e6, infer_steps=50))
    assert np.abs(z).max() < 1e-3
    a = infer_latent(m, sphere_set, _tiny(infer_steps=20))
    np.testing.assert_array_equal(a, infer_latent(m, sphere_set, _tiny(infer_steps=20)))


def test_infer_needs_eval_mode(sphere_set):
    m = DecoderModel(16, 2, 8).train()
    with pytest.raises(ValueError):
        infer_latent(m, sphere_set, _tiny())
