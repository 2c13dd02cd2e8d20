"""Strain-conditioned generation: a small MLP from strain triplets to latent codes.

Strain data is ingested from CSV.  :func:`surrogate_strains` provides a
clearly synthetic stand-in for tests and demos; it is not a structural model.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .blades import PARAM_RANGES, BladeParams
from .meshing import DEFAULT_RES, extract_mesh
from .metrics import nrmse_per_dim
from .nn import Adam, Mlp

log = logging.getLogger(__name__)

STRAIN_COLUMNS = ("eps_x", "eps_y", "eps_z")


@dataclass
class CondConfig:
    hidden: int = 128
    n_hidden: int = 2
    lr: float = 1e-3
    epochs: int = 40_000
    seed: int = 0
    log_every: int = 1

    def validate(self):
        if self.hidden <= 0 or self.n_hidden <= 0:
            raise ValueError("hidden sizes must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0 or self.log_every <= 0:
            raise ValueError("epochs must be >= 0 and log_every > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "CondConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown CondConfig keys: {sorted(unknown)}")
        return cls(**d)


class CondModel:
    """``g(eps)``: standardize, then ``3 -> hidden -> ... -> latent_dim`` with ReLU."""

    def __init__(self, latent_dim: int, hidden: int = 128, n_hidden: int = 2, seed: int = 0,
                 in_mean=None, in_std=None, dtype=np.float64):
        self.latent_dim = int(latent_dim)
        self.net = Mlp(3, [hidden] * n_hidden, self.latent_dim, batchnorm=False,
                       dropout_p=0.0, dtype=dtype, seed=seed).eval()
        self.in_mean = np.zeros(3) if in_mean is None else np.asarray(in_mean, dtype=np.float64)
        self.in_std = np.ones(3) if in_std is None else np.asarray(in_std, dtype=np.float64)
        self.in_min = np.full(3, -np.inf)
        self.in_max = np.full(3, np.inf)

    def standardize(self, eps) -> np.ndarray:
        return (np.asarray(eps, dtype=np.float64).reshape(-1, 3) - self.in_mean) / self.in_std

    def forward(self, eps):
        return self.net.forward(self.standardize(eps))

    def __call__(self, eps) -> np.ndarray:
        return self.forward(eps)[0].astype(np.float64)

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.net.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    # persistence ---------------------------------------------------------

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors, offset, blobs = [], 0, []
        for i, k in self.net.param_keys():
            arr = self.net.layers[i][k].astype("<f4")
            tensors.append({"layer": i, "name": k, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            blobs.append(arr.ravel())
        np.concatenate(blobs).tofile(d / "weights.f32")
        (d / "manifest.json").write_text(json.dumps({
            "kind": "cond_map", "latent_dim": self.latent_dim, "hidden": self.net.hidden,
            "in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
            "in_min": self.in_min.tolist(), "in_max": self.in_max.tolist(),
            "tensors": tensors, "weights_sha256": self.weights_hash(),
        }, indent=1))

    @classmethod
    def load(cls, directory) -> "CondModel":
        d = Path(directory)
        meta = json.loads((d / "manifest.json").read_text())
        m = cls(meta["latent_dim"], meta["hidden"][0], len(meta["hidden"]),
                in_mean=meta["in_mean"], in_std=meta["in_std"])
        m.in_min = np.asarray(meta["in_min"], dtype=np.float64)
        m.in_max = np.asarray(meta["in_max"], dtype=np.float64)
        blob = np.fromfile(d / "weights.f32", dtype="<f4")
        for t in meta["tensors"]:
            n = int(np.prod(t["shape"]))
            m.net.layers[t["layer"]][t["name"]] = (
                blob[t["offset"]:t["offset"] + n].reshape(t["shape"]).astype(np.float64))
        return m


def _mse_backward(model: CondModel, x_std: np.ndarray, target: np.ndarray):
    out, cache = model.net.forward(x_std)
    diff = out - target
    loss = float(np.mean(diff ** 2))
    grads, _ = model.net.backward(cache, 2.0 * diff / diff.size)
    return loss, grads, out


def train_cond(strains, codes, cfg: CondConfig | None = None, progress=None):
    """Full-batch Adam on mean squared error between ``g(eps_i)`` and ``z_i``.

    Returns ``(model, curve)`` where ``curve`` holds the mean per-dimension
    NRMSE (percent of truth range) before each logged epoch's update.
    """
    cfg = (cfg or CondConfig()).validate()
    x = np.asarray(strains, dtype=np.float64).reshape(-1, 3)
    z = np.asarray(getattr(codes, "codes", codes), dtype=np.float64)
    if len(x) != len(z):
        raise ValueError("one latent code per strain triplet expected")
    if len(x) < 1:
        raise ValueError("need at least one pair")
    _, first = np.unique(x, axis=0, return_index=True)
    if len(first) < len(x):
        log.warning("%d duplicate strain triplets; fitting them as a regression", len(x) - len(first))
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    model = CondModel(z.shape[1], cfg.hidden, cfg.n_hidden, cfg.seed, mean, std)
    model.in_min, model.in_max = x.min(axis=0), x.max(axis=0)
    xs = model.standardize(x)
    opt = Adam(model.net.params())
    curve = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for epoch in range(cfg.epochs):
            _, grads, out = _mse_backward(model, xs, z)
            if epoch % cfg.log_every == 0:
                curve.append(_nrmse(z, out))
                if progress is not None:
                    progress(epoch + 1, curve[-1])
            opt.step(grads, cfg.lr)
    return model, curve


def _nrmse(truth, pred) -> float:
    if len(truth) < 2:
        # a single design has no range; fall back to absolute RMSE in percent
        return float(100.0 * np.sqrt(np.mean((pred - truth) ** 2)))
    return nrmse_per_dim(truth, pred)[1]


def predict_code(model: CondModel, target) -> np.ndarray:
    eps = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if np.any(eps < model.in_min) or np.any(eps > model.in_max):
        warnings.warn("strain target outside the training range", RuntimeWarning, stacklevel=2)
    z = model(eps)
    return z[0] if np.ndim(target) == 1 else z


def conditional_generate(model: CondModel, decoder, target, res: int = DEFAULT_RES, **mesh_kw):
    """Predict a code for ``target`` and decode it with the frozen decoder."""
    z = predict_code(model, target)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mesh = extract_mesh(decoder, z, res, **mesh_kw)
    if mesh.is_empty:
        raise ValueError("conditioning left manifold: decoded field has no zero level set")
    return mesh, z


# -- strain data ----------------------------------------------------------

def read_strains(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not set(("design_id",) + STRAIN_COLUMNS) <= set(rows[0]):
        raise ValueError(f"{path}: need columns design_id,eps_x,eps_y,eps_z")
    eps = np.array([[float(r[c]) for c in STRAIN_COLUMNS] for r in rows]).reshape(-1, 3)
    if not np.all(np.isfinite(eps)):
        raise ValueError(f"{path}: non-finite strain values")
    return [r["design_id"] for r in rows], eps


def write_strains(path, design_ids, eps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("design_id",) + STRAIN_COLUMNS)
        for did, row in zip(design_ids, np.asarray(eps)):
            w.writerow([did] + [repr(float(v)) for v in row])


def _unit(params: BladeParams, name: str) -> float:
    lo, hi = PARAM_RANGES[name]
    return (getattr(params, name) - lo) / (hi - lo)


def surrogate_strains(params: BladeParams, noise: float = 0.05, seed: int = 0) -> np.ndarray:
    """Synthetic strain triplet: smooth, decreasing in K1 and K3, 5% multiplicative noise.

    Stiffer (less tapered, longer-chord) tops carry lower strain.  Magnitudes
    sit around 1e-3 so the numbers look like strains; nothing else about them
    is physical.
    """
    k1, k2, k3 = _unit(params, "k1"), _unit(params, "k2"), _unit(params, "k3")
    size = _unit(params, "bld") + 0.5 * _unit(params, "bcd")
    base = np.array([
        1.6e-3 * np.exp(-1.0 * k1 - 0.6 * k3),
        1.2e-3 * np.exp(-0.5 * k1 - 1.0 * k3),
        0.8e-3 * np.exp(-0.8 * k1 - 0.8 * k3),
    ]) * (1.0 - 0.1 * k2) * (1.0 - 0.15 * size / 1.5)
    rng = np.random.default_rng([seed, 31])
    return base * (1.0 + noise * rng.standard_normal(3))


def cond_config_dict(cfg: CondConfig) -> dict:
    return asdict(cfg)
