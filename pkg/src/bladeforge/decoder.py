"""Auto-decoder: shared SDF decoder plus one free latent code per design."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import TrainingError
from .io import read_latents, write_latents
from .nn import Adam, Mlp, RowAdam, step_lr
from .sdf import SdfSampleSet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    latent_dim: int = 256
    n_layers: int = 8
    width: int = 512
    dropout_p: float = 0.2
    lr0: float = 1e-3
    halve_every: int = 500
    lambda_z: float = 1e-4
    delta: float = 0.1
    epochs: int = 200
    batch_size: int = 4096
    latent_init_std: float = 0.01
    seed: int = 0
    dtype: str = "float32"
    infer_steps: int = 1000
    infer_batch: int = 0          # 0: every sample each step
    out_scale: float = 0.1        # init std factor of the output layer
    bn_recalibrate: bool = True   # refit BN statistics without dropout after training

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "bn_recalibrate":
                continue
            if f.name in ("seed", "infer_batch", "epochs", "lambda_z"):
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif f.name == "dropout_p":
                if not 0.0 <= v < 1.0:
                    raise ValueError("dropout_p must lie in [0, 1)")
            elif f.name == "dtype":
                if v not in ("float32", "float64"):
                    raise ValueError("dtype must be float32 or float64")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class DecoderModel:
    """``f(z, x)``: latent code and 3-D point in, signed distance out."""

    def __init__(self, latent_dim: int = 256, n_layers: int = 8, width: int = 512,
                 dropout_p: float = 0.2, seed: int = 0, dtype=np.float32,
                 out_scale: float = 0.1):
        self.latent_dim = int(latent_dim)
        self.net = Mlp(self.latent_dim + 3, [width] * n_layers, 1, batchnorm=True,
                       dropout_p=dropout_p, dtype=dtype, seed=seed, out_scale=out_scale)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "DecoderModel":
        return cls(cfg.latent_dim, cfg.n_layers, cfg.width, cfg.dropout_p, cfg.seed,
                   np.dtype(cfg.dtype), cfg.out_scale)

    @property
    def mode(self) -> str:
        return "train" if self.net.training else "eval"

    def train(self):
        self.net.train()
        return self

    def eval(self):
        self.net.eval()
        return self

    @property
    def dtype(self):
        return self.net.dtype

    def architecture(self) -> dict:
        return {"latent_dim": self.latent_dim, "n_layers": len(self.net.hidden),
                "width": self.net.hidden[0] if self.net.hidden else 0,
                "dropout_p": self.net.dropout_p}

    def _inputs(self, z, x):
        z = np.asarray(z, dtype=self.dtype)
        x = np.asarray(x, dtype=self.dtype).reshape(-1, 3)
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent has {z.shape[-1]} dims, model expects {self.latent_dim}")
        z = np.broadcast_to(z.reshape(-1, self.latent_dim), (len(x), self.latent_dim))
        return np.concatenate([z, x], axis=1)

    def forward(self, z, x, rng=None, update_stats: bool = True):
        out, cache = self.net.forward(self._inputs(z, x), rng, update_stats)
        return out[:, 0], cache

    def __call__(self, z, x, rng=None):
        return self.forward(z, x, rng)[0]

    def field(self, z, chunk: int = 65536):
        """Fast eval-mode evaluator ``x -> f(z, x)`` with batch norm folded away."""
        layers = self.net.fused_eval()
        W0, b0 = layers[0]
        zc = np.asarray(z, dtype=np.float64).reshape(self.latent_dim)
        first_b = zc @ W0[:self.latent_dim] + b0
        first_W = W0[self.latent_dim:]
        rest = [(W.astype(np.float32), b.astype(np.float32)) for W, b in layers[1:]]
        first_W, first_b = first_W.astype(np.float32), first_b.astype(np.float32)

        def f(x):
            x = np.asarray(x, dtype=np.float32).reshape(-1, 3)
            out = np.empty(len(x), dtype=np.float64)
            for s in range(0, len(x), chunk):
                h = np.maximum(x[s:s + chunk] @ first_W + first_b, 0)
                for j, (W, b) in enumerate(rest):
                    h = h @ W + b
                    if j < len(rest) - 1:
                        np.maximum(h, 0, out=h)
                out[s:s + chunk] = h[:, 0]
            return out

        return f

    def weights_hash(self) -> str:
        h = hashlib.sha256()
        for i, k in self.net.state_keys():
            h.update(f"{i}:{k}".encode())
            h.update(np.ascontiguousarray(self.net.layers[i][k]).tobytes())
        return h.hexdigest()

    def copy(self) -> "DecoderModel":
        new = object.__new__(DecoderModel)
        new.latent_dim = self.latent_dim
        new.net = self.net.copy()
        return new


def forward(model: DecoderModel, z, x, rng=None):
    """Decoder output for one code and one or many points."""
    arr = np.asarray(x)
    out = model(z, arr, rng)
    return float(out[0]) if arr.ndim == 1 else out


@dataclass
class LatentTable:
    design_ids: list
    codes: np.ndarray

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 2 or len(self.codes) != len(self.design_ids):
            raise ValueError("one latent row per design id is required")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("latent codes must be finite")

    @property
    def latent_dim(self) -> int:
        return self.codes.shape[1]

    def __len__(self):
        return len(self.design_ids)

    def code(self, design_id) -> np.ndarray:
        return self.codes[self.design_ids.index(design_id)]

    def subset(self, ids) -> "LatentTable":
        idx = [self.design_ids.index(i) for i in ids]
        return LatentTable([self.design_ids[i] for i in idx], self.codes[idx].copy())

    def save(self, path):
        write_latents(path, self.design_ids, self.codes)

    @classmethod
    def load(cls, path) -> "LatentTable":
        ids, codes = read_latents(path)
        return cls(ids, codes)


@dataclass
class Batch:
    design_idx: np.ndarray  # (B,) row of the latent table per sample
    points: np.ndarray      # (B, 3)
    sdf: np.ndarray         # (B,)


def _data_residual(pred, target, delta):
    clipped = np.clip(pred, -delta, delta)
    resid = clipped - target
    inside = (pred > -delta) & (pred < delta)
    return resid, inside


def loss_joint(model: DecoderModel, latents: LatentTable, batch: Batch, cfg: TrainConfig,
               rng=None, pred=None) -> float:
    """Mean clamped L1 over the batch plus ``lambda_z`` times the mean squared
    code norm of the designs present in the batch."""
    if len(batch.sdf) == 0:
        raise ValueError("empty batch")
    if pred is None:
        pred, _ = model.forward(latents.codes[batch.design_idx], batch.points, rng, update_stats=False)
    resid, _ = _data_residual(pred, batch.sdf, cfg.delta)
    rows = np.unique(batch.design_idx)
    prior = np.mean(np.sum(latents.codes[rows].astype(np.float64) ** 2, axis=1))
    return float(np.mean(np.abs(resid)) + cfg.lambda_z * prior)


def backward(model: DecoderModel, latents: LatentTable, batch: Batch, cfg: TrainConfig,
             rng=None, update_stats: bool = False):
    """Loss value, decoder gradients, touched latent rows and their gradients."""
    z = latents.codes[batch.design_idx]
    pred, cache = model.forward(z, batch.points, rng, update_stats=update_stats)
    resid, inside = _data_residual(pred, batch.sdf, cfg.delta)
    n = len(pred)
    rows, inv = np.unique(batch.design_idx, return_inverse=True)
    codes = latents.codes[rows].astype(np.float64)
    loss = float(np.mean(np.abs(resid)) + cfg.lambda_z * np.mean(np.sum(codes ** 2, axis=1)))

    dpred = (np.sign(resid) * inside / n)[:, None]
    grads, dinp = model.net.backward(cache, dpred)
    dz_samples = dinp[:, :model.latent_dim].astype(np.float64)
    gz = np.zeros((len(rows), model.latent_dim))
    np.add.at(gz, inv, dz_samples)
    gz += 2.0 * cfg.lambda_z * codes / len(rows)
    return loss, grads, rows, gz


def iter_batches(datasets: list[SdfSampleSet], batch_size: int, rng: np.random.Generator):
    """Mixed-design minibatches covering every sample once per epoch."""
    sizes = [len(d) for d in datasets]
    design_idx = np.repeat(np.arange(len(datasets)), sizes)
    pts = np.concatenate([d.points for d in datasets])
    sdf = np.concatenate([d.sdf for d in datasets])
    order = rng.permutation(len(sdf))
    for s in range(0, len(order), batch_size):
        sel = order[s:s + batch_size]
        if len(sel) < 2:
            continue  # batch norm needs at least two samples
        yield Batch(design_idx[sel], pts[sel], sdf[sel])


@dataclass
class TrainResult:
    model: DecoderModel
    latents: LatentTable
    loss_curve: list = field(default_factory=list)
    steps: int = 0


def train(datasets: list[SdfSampleSet], cfg: TrainConfig, checkpoint_dir=None,
          checkpoint_every: int = 0, progress=None) -> TrainResult:
    """Jointly fit decoder weights and per-design codes with Adam.

    The learning rate starts at ``cfg.lr0`` and halves every
    ``cfg.halve_every`` optimizer steps.  Returns the model (left in eval
    mode), the latent table and the per-epoch mean loss.
    """
    if not datasets:
        raise ValueError("need at least one design")
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    model = DecoderModel.from_config(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    codes = rng.normal(0.0, cfg.latent_init_std, (len(datasets), cfg.latent_dim)).astype(dtype)
    latents = LatentTable([d.design_id for d in datasets], codes)
    result = TrainResult(model, latents)
    if cfg.epochs == 0:
        model.eval()
        return result

    opt = Adam(model.net.params())
    zopt = RowAdam(latents.codes)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        losses, weights = [], []
        for batch in iter_batches(datasets, cfg.batch_size, rng):
            lr = step_lr(cfg.lr0, step, cfg.halve_every)
            loss, grads, rows, gz = backward(model, latents, batch, cfg, rng, update_stats=True)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            opt.step(grads, lr)
            zopt.step(rows, gz.astype(dtype), lr)
            losses.append(loss)
            weights.append(len(batch.sdf))
            step += 1
        epoch_loss = float(np.average(losses, weights=weights))
        result.loss_curve.append(epoch_loss)
        if progress is not None:
            progress(epoch + 1, epoch_loss)
        log.info("epoch %d loss %.6f lr %.2e", epoch + 1, epoch_loss, step_lr(cfg.lr0, step, cfg.halve_every))
        if checkpoint_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            model.eval()
            save_checkpoint(checkpoint_dir, model, latents, cfg, epoch + 1, result.loss_curve)
            model.train()
    result.steps = step
    if cfg.bn_recalibrate:
        recalibrate_bn(model, latents, datasets)
    model.eval()
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, latents, cfg, cfg.epochs, result.loss_curve)
    return result


def recalibrate_bn(model: DecoderModel, latents: LatentTable, datasets: list[SdfSampleSet]):
    """Refit batch-norm running statistics on every training sample, dropout off."""
    def chunks(size=65536):
        for row, d in enumerate(datasets):
            for s in range(0, len(d), size):
                yield model._inputs(latents.codes[row], d.points[s:s + size])

    model.net.calibrate_bn(chunks)
    return model


def infer_latent(model: DecoderModel, samples: SdfSampleSet, cfg: TrainConfig,
                 init=None, steps: int | None = None, seed: int = 0):
    """Fit a code to one design's samples with the decoder frozen.

    Eval-mode decoder (running batch-norm statistics, no dropout).  Adam with
    the training learning-rate schedule; starts from zero unless ``init`` is
    given.  Returns the code with the lowest loss seen.
    """
    if model.net.training:
        raise ValueError("infer_latent needs the decoder in eval mode")
    steps = cfg.infer_steps if steps is None else int(steps)
    z = np.zeros(model.latent_dim) if init is None else np.asarray(init, dtype=np.float64).copy()
    pts = np.asarray(samples.points)
    sdf = np.asarray(samples.sdf, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    m = np.zeros_like(z)
    v = np.zeros_like(z)
    best, best_loss = z.copy(), np.inf
    prev, rising = np.inf, 0
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        if cfg.infer_batch and cfg.infer_batch < len(sdf):
            sel = rng.choice(len(sdf), cfg.infer_batch, replace=False)
            x, s = pts[sel], sdf[sel]
        else:
            x, s = pts, sdf
        pred, cache = model.forward(z, x)
        resid, inside = _data_residual(pred.astype(np.float64), s, cfg.delta)
        loss = float(np.mean(np.abs(resid)) + cfg.lambda_z * np.dot(z, z))
        if loss < best_loss:
            best, best_loss = z.copy(), loss
        rising = rising + 1 if loss > prev else 0
        prev = loss
        if rising >= 10:
            log.warning("latent fit for %s diverging; returning best code", samples.design_id)
            break
        dpred = (np.sign(resid) * inside / len(s))[:, None]
        _, dinp = model.net.backward(cache, dpred, param_grads=False)
        g = dinp[:, :model.latent_dim].astype(np.float64).sum(axis=0) + 2.0 * cfg.lambda_z * z
        lr = step_lr(cfg.lr0, t - 1, cfg.halve_every)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        z = z - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    pred, _ = model.forward(z, pts)
    resid, _ = _data_residual(pred.astype(np.float64), sdf, cfg.delta)
    final = float(np.mean(np.abs(resid)) + cfg.lambda_z * np.dot(z, z))
    if final < best_loss:
        best = z
    return best


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(directory, model: DecoderModel, latents: LatentTable | None,
                    cfg: TrainConfig, epoch: int, loss_curve=()):
    """Flat little-endian f32 blob + JSON manifest + loss curve CSV (+ latents CSV)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for i, k in model.net.state_keys():
        arr = np.asarray(model.net.layers[i][k], dtype="<f4")
        entries.append({"layer": i, "name": k, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.ravel())
    (d / "weights.f32").write_bytes(np.concatenate(chunks).tobytes())
    manifest = {
        "format": "bladeforge-decoder/1",
        "architecture": model.architecture(),
        "tensors": entries,
        "config": asdict(cfg),
        "epoch": int(epoch),
        "loss_curve": "loss_curve.csv",
        "weights_sha256": model.weights_hash(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))
    with open(d / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(loss_curve, start=1):
            w.writerow([e, repr(float(v))])
    if latents is not None:
        latents.save(d / "latents.csv")


def load_checkpoint(directory, dtype=np.float32):
    """Return ``(model, latents_or_None, cfg, manifest)`` with the model in eval mode."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    arch = manifest["architecture"]
    model = DecoderModel(arch["latent_dim"], arch["n_layers"], arch["width"], arch["dropout_p"],
                         dtype=dtype)
    blob = np.frombuffer((d / "weights.f32").read_bytes(), dtype="<f4")
    for e in manifest["tensors"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(dtype)
        model.net.layers[e["layer"]][e["name"]] = arr
    latents = LatentTable.load(d / "latents.csv") if (d / "latents.csv").exists() else None
    model.eval()
    return model, latents, cfg, manifest


def read_loss_curve(directory) -> list[float]:
    with open(Path(directory) / "loss_curve.csv", newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]
