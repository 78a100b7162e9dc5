"""Experiment configuration: defaults, strict parsing, dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

STRATEGIES = ("adagq", "fedavg", "qsgd", "topk", "fedpaq", "norm_adaptive")

# per-strategy parameters and their defaults
STRATEGY_DEFAULTS: dict[str, dict[str, Any]] = {
    "adagq": {"local_epochs": 1, "codec": "qsgd"},
    "fedavg": {"local_epochs": 5},
    "qsgd": {"local_epochs": 1, "bits": 8},
    "topk": {"local_epochs": 1, "fraction": 0.1},
    "fedpaq": {"local_epochs": 5, "bits": 8},
    "norm_adaptive": {"local_epochs": 1, "initial_bits": 8},
}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    n_classes: int = 10
    input_dim: int = 32
    n_samples: int = 20000
    n_test: int = 4000
    class_sep: float = 6.0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    path: str | None = None
    test_path: str | None = None
    label_column: int | str = -1

    def validate(self) -> None:
        if self.kind not in ("synthetic", "idx", "csv"):
            raise ConfigError(f"dataset.kind must be synthetic, idx or csv, got {self.kind!r}")
        if self.kind == "synthetic":
            if self.n_classes < 2 or self.input_dim < self.n_classes:
                raise ConfigError("synthetic data needs n_classes >= 2 and input_dim >= n_classes")
            if self.n_samples < 1 or self.n_test < 1:
                raise ConfigError("n_samples and n_test must be positive")
            if self.class_sep < 0:
                raise ConfigError("class_sep must be >= 0")
        elif self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("idx dataset needs images and labels paths")
        elif self.kind == "csv" and not self.path:
            raise ConfigError("csv dataset needs a path")


@dataclass
class ModelSpec:
    kind: str = "mlp"
    hidden: list[int] = field(default_factory=lambda: [64])

    def validate(self) -> None:
        if self.kind not in ("mlp", "logistic_regression"):
            raise ConfigError(f"model.kind must be mlp or logistic_regression, got {self.kind!r}")
        if self.kind == "mlp" and (not self.hidden or any(h < 1 for h in self.hidden)):
            raise ConfigError("model.hidden must list positive layer widths")


@dataclass
class ControllerSpec:
    s0_bits: int = 8
    lambda_g: float = 1.0
    s_min: int = 1
    s_max: int = 2**15 - 1

    def validate(self) -> None:
        if not 1 <= self.s0_bits <= 15:
            raise ConfigError("controller.s0_bits must be in [1, 15]")
        if not 1 <= self.s_min <= self.s_max <= 2**15 - 1:
            raise ConfigError("controller bounds must satisfy 1 <= s_min <= s_max <= 32767")
        if self.lambda_g < 0:
            raise ConfigError("controller.lambda_g must be >= 0")


@dataclass
class ExperimentConfig:
    strategy: str = "adagq"
    strategy_params: dict[str, Any] = field(default_factory=dict)
    n_clients: int = 20
    sigma_d: float = 0.5
    sigma_r: float | None = None
    rate_range_mbps: list[float] = field(default_factory=lambda: [5.0, 20.0])
    rate_jitter: float = 0.0
    compute_range_s: list[float] = field(default_factory=lambda: [0.5, 1.5])
    compute_noise_sigma: float = 0.05
    downlink: str = "full"
    t_server: float = 0.05
    seed: int = 0
    round_cap: int = 200
    target_loss: float | None = None
    target_accuracy: float | None = None
    batch_size: int = 32
    lr: float = 0.05
    lr_decay: float = 0.995
    probe_fraction: float = 0.1
    profiles_path: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    controller: ControllerSpec = field(default_factory=ControllerSpec)

    def params(self) -> dict[str, Any]:
        """Strategy parameters with defaults filled in."""
        return {**STRATEGY_DEFAULTS[self.strategy], **self.strategy_params}

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        allowed = STRATEGY_DEFAULTS[self.strategy]
        for key in self.strategy_params:
            if key not in allowed:
                raise ConfigError(f"unknown strategy_params key {key!r} for {self.strategy}")
        p = self.params()
        if int(p["local_epochs"]) < 1:
            raise ConfigError("local_epochs must be >= 1")
        if "bits" in p and not 1 <= int(p["bits"]) <= 15:
            raise ConfigError("bits must be in [1, 15]")
        if "initial_bits" in p and not 1 <= int(p["initial_bits"]) <= 15:
            raise ConfigError("initial_bits must be in [1, 15]")
        if "fraction" in p and not 0 < float(p["fraction"]) <= 1:
            raise ConfigError("fraction must be in (0, 1]")
        if "codec" in p and p["codec"] not in ("qsgd", "identity"):
            raise ConfigError("codec must be qsgd or identity")
        if self.n_clients < 2:
            raise ConfigError("n_clients must be >= 2")
        if not 0 <= self.sigma_d <= 1:
            raise ConfigError("sigma_d must be in [0, 1]")
        if self.sigma_r is not None and self.sigma_r < 1:
            raise ConfigError(f"sigma_r must be >= 1 (σ_r ≥ 1), got {self.sigma_r}")
        lo, hi = _pair(self.rate_range_mbps, "rate_range_mbps")
        if not 0 < lo <= hi:
            raise ConfigError("rate_range_mbps must satisfy 0 < low <= high")
        lo, hi = _pair(self.compute_range_s, "compute_range_s")
        if not 0 < lo <= hi:
            raise ConfigError("compute_range_s must satisfy 0 < low <= high")
        if not 0 <= self.rate_jitter < 1:
            raise ConfigError("rate_jitter must be in [0, 1)")
        if self.compute_noise_sigma < 0:
            raise ConfigError("compute_noise_sigma must be >= 0")
        if self.downlink not in ("full", "mirror"):
            raise ConfigError("downlink must be full or mirror")
        if self.t_server < 0:
            raise ConfigError("t_server must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.round_cap < 0:
            raise ConfigError("round_cap must be >= 0")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise ConfigError("target_accuracy must be in (0, 1]")
        if self.target_loss is not None and self.target_loss <= 0:
            raise ConfigError("target_loss must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")
        if not 0 < self.probe_fraction < 1:
            raise ConfigError("probe_fraction must be in (0, 1)")
        self.dataset.validate()
        self.model.validate()
        self.controller.validate()

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["strategy_params"] = self.params()
        return d


def _pair(v, name: str) -> tuple[float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"{name} must be a [low, high] pair")
    return float(v[0]), float(v[1])


_NESTED = {"dataset": DatasetSpec, "model": ModelSpec, "controller": ControllerSpec}


def _build(cls, data: dict[str, Any], prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {prefix + key!r}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and cls is ExperimentConfig:
            value = _build(_NESTED[key], value or {}, prefix=f"{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data or {})
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid value: {exc}") from None
    return cfg


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``key.sub=value`` overrides; values are parsed as YAML scalars/lists."""
    data = dict(data or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node[part] = dict(node.get(part) or {})
            node = node[part]
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def parse_config(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    """Load a YAML/JSON config file (or defaults when ``path`` is None)."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(apply_overrides(data, list(overrides)))
