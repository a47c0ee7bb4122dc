"""Experiment configuration: defaults, file loading and hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .data import SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig


@dataclass
class ExperimentConfig:
    data: str | None = None
    synthetic: dict | None = None
    d: int = 128
    k: int = 4
    ranks: int | list[int] = 2
    n_layers: int = 3
    n_heads: int = 4
    alpha: float = 1.0
    lam: float = 0.001
    lr: float = 0.02
    batch_size: int = 128
    T: int = 7
    C_base: int | None = None
    missing_rate: float = 0.3
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 50
    patience: int = 10
    bank: str = "ept"
    use_prompts: bool = True
    train_ept_every_session: bool = False
    train_encoders_every_session: bool = False
    dcl_pattern_subsample: int = 128
    weighted_positive_term: bool = False
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    def validate(self) -> None:
        if self.d % 2:
            raise ConfigError(f"d={self.d} must be even")
        if not 0 <= self.missing_rate < 1:
            raise ConfigError(f"missing_rate={self.missing_rate} must lie in [0, 1)")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if (self.data is None) == (self.synthetic is None):
            raise ConfigError("set exactly one of 'data' (manifest path) or 'synthetic' (generator spec)")
        if self.bank not in ("ept", "dense", "perview"):
            raise ConfigError(f"unknown bank {self.bank!r}")
        if self.lam < 0 or self.alpha <= 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("need lam >= 0, alpha > 0, lr > 0, batch_size >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    def model_config(self, view_dims) -> ModelConfig:
        return ModelConfig(view_dims=list(view_dims), d=self.d, n_layers=self.n_layers, n_heads=self.n_heads,
                           k=self.k, ranks=self.ranks, bank=self.bank, use_prompts=self.use_prompts)

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        spec = dict(self.synthetic or {})
        spec.setdefault("seed", seed)
        spec.setdefault("val_fraction", self.val_fraction)
        spec.setdefault("test_fraction", self.test_fraction)
        try:
            return SyntheticSpec(**spec)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


FIELD_NAMES = [f.name for f in fields(ExperimentConfig)]


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    unknown = set(raw) - set(FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(**raw)
    if cfg.data is not None and base_dir is not None and not Path(cfg.data).is_absolute():
        cfg.data = str((base_dir / cfg.data).resolve())
    if isinstance(cfg.seeds, int):
        cfg.seeds = [cfg.seeds]
    try:
        cfg.validate()
    except TypeError as exc:
        raise ConfigError(f"config value has the wrong type: {exc}") from None
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    raw.update(overrides or {})
    return config_from_dict(raw, path.parent)
