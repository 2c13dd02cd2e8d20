"""Run configuration: one JSON document covering every stage.

Defaults are the full-scale values; :func:`tiny_config` gives the desk-scale
variant used by the end-to-end tests.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .condmap import CondConfig
from .decoder import TrainConfig
from .errors import ConfigError

SCHEMA_VERSION = 1


@dataclass
class DatasetConfig:
    n_train: int = 222
    n_test: int = 300
    n_surface: int = 10_000
    n_interior: int = 5_000
    strict: bool = False


@dataclass
class SdfConfig:
    delta: float = 0.1
    n_samples: int = 20_000
    band_fraction: float = 0.5
    tol_sign: float = 0.0
    tol_surf: float = 1e-3


@dataclass
class MeshConfig:
    res: int = 128
    bound: float = 1.1
    max_aspect: float = 20.0
    n_extract_test: int = 0       # 0: every test design


@dataclass
class EvalConfig:
    n_pred_samples: int = 100_000
    hist_bins: int = 30


@dataclass
class LatentConfig:
    n_samples: int = 10
    temperature: float = 1.0
    interp_steps: int = 5
    traverse_steps: int = 7
    traverse_span: float = 2.0    # in standard deviations along the axis
    pca_on: str = "test"          # "test" or "train"


@dataclass
class CondSection:
    enabled: bool = True
    strains_csv: str = ""         # empty: synthetic surrogate strains
    surrogate_noise: float = 0.05
    cfg: CondConfig = field(default_factory=CondConfig)


_SECTIONS = {
    "dataset": DatasetConfig, "sdf": SdfConfig, "train": TrainConfig, "mesh": MeshConfig,
    "eval": EvalConfig, "latent": LatentConfig, "cond": CondSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    sdf: SdfConfig = field(default_factory=SdfConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    cond: CondSection = field(default_factory=CondSection)
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "RunConfig":
        d, s, m = self.dataset, self.sdf, self.mesh
        checks = [
            (self.schema_version == SCHEMA_VERSION, f"schema_version must be {SCHEMA_VERSION}"),
            (self.seed >= 0, "seed must be non-negative"),
            (d.n_train >= 1 and d.n_test >= 0, "need n_train >= 1 and n_test >= 0"),
            (d.n_surface >= 4 and d.n_interior >= 0, "need n_surface >= 4 and n_interior >= 0"),
            (s.delta > 0, "delta must be positive"),
            (s.n_samples > 0, "n_samples must be positive"),
            (0.0 <= s.band_fraction <= 1.0, "band_fraction must lie in [0, 1]"),
            (s.tol_surf > 0, "tol_surf must be positive"),
            (m.res >= 8, "mesh res must be at least 8"),
            (m.bound > 1.0, "mesh bound must exceed 1 (normalized shapes touch the unit cube)"),
            (m.max_aspect > 1.0 or m.max_aspect == 0, "max_aspect must exceed 1 (0 disables cleanup)"),
            (self.eval.n_pred_samples > 0, "n_pred_samples must be positive"),
            (self.latent.temperature > 0, "temperature must be positive"),
            (self.latent.interp_steps >= 2 and self.latent.traverse_steps >= 2, "need at least 2 steps"),
            (self.latent.pca_on in ("test", "train"), "pca_on must be 'test' or 'train'"),
            (self.cond.surrogate_noise >= 0, "surrogate_noise must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.train_config().validate()
            self.cond.cfg.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def train_config(self) -> TrainConfig:
        """Training settings with the clamp distance taken from the SDF section."""
        return replace(self.train, delta=self.sdf.delta, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            if name in _SECTIONS:
                kw[name] = _section(name, _SECTIONS[name], value)
            else:
                kw[name] = value
        return cls(**kw).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)


def _section(name, klass, value):
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in fields(klass)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    value = dict(value)
    if klass is CondSection and "cfg" in value:
        value["cfg"] = _section("cond.cfg", CondConfig, value["cfg"])
    try:
        return klass(**value)
    except TypeError as e:
        raise ConfigError(f"bad section {name!r}: {e}") from e


def tiny_config(seed: int = 0) -> RunConfig:
    """Desk-scale settings: 8 training designs, 4x64 decoder, latent 16, R=64."""
    return RunConfig(
        seed=seed,
        dataset=DatasetConfig(n_train=8, n_test=2, n_surface=4000, n_interior=2000),
        sdf=SdfConfig(n_samples=2000),
        train=TrainConfig(latent_dim=16, n_layers=4, width=64, epochs=60, batch_size=1024,
                          infer_steps=300),
        mesh=MeshConfig(res=64),
        eval=EvalConfig(n_pred_samples=20_000),
        latent=LatentConfig(n_samples=3, interp_steps=3, traverse_steps=3, pca_on="train"),
        cond=CondSection(cfg=CondConfig(epochs=2000, log_every=10)),
    ).validate()


def env_seed(default: int) -> int:
    """``FORGE_SEED`` when set, else ``default``."""
    raw = os.environ.get("FORGE_SEED", "").strip()
    if not raw:
        return default
    try:
        seed = int(raw)
    except ValueError as e:
        raise ConfigError(f"FORGE_SEED must be an integer, got {raw!r}") from e
    if seed < 0:
        raise ConfigError("FORGE_SEED must be non-negative")
    return seed
