"""Experiment configuration: JSON schema, presets and content hashing.

Resolution order, later wins: dataclass defaults, ``--preset``, ``--config``
JSON file, individual command-line flags.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .errors import ConfigError, ContractError
from .federation import RoundConfig

DATASETS = ("cifar10", "synthetic")
MODELS = ("base", "deep")
_UNHASHED = ("output_dir",)


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "cifar10"
    data_dir: Optional[str] = None
    train_subset: int = 0  # 0 keeps every training sample
    test_subset: int = 0
    synthetic_classes: int = 10
    synthetic_train_per_class: int = 100
    synthetic_test_per_class: int = 30
    synthetic_dim: int = 32
    synthetic_noise: float = 0.1
    # partition
    n_clients: int = 10
    alpha: float = 0.5
    iid: bool = False
    min_size: int = 10
    # local objective
    regularizer: str = "cka"
    metric: str = "linear_cka"
    mu: float = 3.0
    m_layers: int = 2
    tau: float = 0.5
    bandwidth_multiplier: float = 1.0
    # optimisation
    rounds: int = 100
    local_epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    client_fraction: float = 1.0
    # run
    model: str = "base"
    deep_extra_layers: int = 24
    deep_width: int = 512
    seed: int = 0
    threads: int = 1
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if not self.iid and not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be a positive finite number, got {self.alpha}")
        for name in ("train_subset", "test_subset", "min_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.n_clients < 1:
            raise ConfigError("n_clients must be at least 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be at least 1")
        try:
            self.round_config()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    def round_config(self) -> RoundConfig:
        return RoundConfig(
            rounds=self.rounds, n_clients=self.n_clients, local_epochs=self.local_epochs,
            lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay, mu=self.mu,
            m_layers=self.m_layers, batch_size=self.batch_size, tau=self.tau,
            regularizer={"kind": self.regularizer, "metric": self.metric}, seed=self.seed,
            client_fraction=self.client_fraction, threads=self.threads,
            bandwidth_multiplier=self.bandwidth_multiplier,
        )

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, value in data.items():
            values[key] = _coerce(known[key], value)
        return cls(**values)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        return cls().overlay_file(path)

    def overlay_file(self, path: Union[str, Path]) -> "ExperimentConfig":
        """Copy of this config with the keys present in a JSON file replaced."""
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parsed = ExperimentConfig.from_json(text)
        return self.replace(**{k: getattr(parsed, k) for k in json.loads(text)})

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def sha256(self) -> str:
        """Hash of every field that can change results; the output location is left out."""
        content = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        canonical = json.dumps(content, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def csv_comment(self) -> str:
        return f"config_sha256={self.sha256()}"

    def resolved_data_dir(self) -> Optional[str]:
        return os.environ.get("FEDCKA_DATA_DIR") or self.data_dir


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    default = f.default
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{f.name} may not be null")
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot use {value!r}") from None


PRESETS: Dict[str, Dict[str, Any]] = {
    # full-scale protocol: all of CIFAR-10, 100 rounds of 10 local epochs
    "full": {},
    # laptop-scale CIFAR-10 runs
    "desk": dict(train_subset=10000, test_subset=2000, rounds=10, local_epochs=2, lr=0.01),
    # seconds-long runs on synthetic blobs
    "smoke": dict(dataset="synthetic", n_clients=3, rounds=3, local_epochs=2, lr=0.01,
                  batch_size=16, synthetic_classes=4, synthetic_train_per_class=100,
                  synthetic_test_per_class=10, synthetic_dim=16, min_size=5),
}


def from_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ExperimentConfig(**PRESETS[name])


def ensure_writable_dir(path: Union[str, Path]) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=p):
            pass
    except OSError as exc:
        raise ConfigError(f"output directory {p} is not writable: {exc}") from exc
    return p
