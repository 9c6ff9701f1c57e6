"""Run configuration: profiles, ``key = value`` config files and overrides.

Precedence, lowest first: profile defaults, config file, command-line flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .data import SyntheticParams
from .errors import ConfigurationError
from .model import ModelConfig
from .training import TrainSettings
from .weakseg import DEFAULT_TAU, StructuringElement

PROFILES: dict[str, dict[str, Any]] = {
    "desk": dict(input_size=64, base_channels=8, max_channels=32, depth=6, epochs=30),
    "paper": dict(input_size=250, base_channels=64, max_channels=512, depth=8, epochs=300),
}


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    dataset: str = ""
    out: str = "."
    # model
    input_size: int = 64
    base_channels: int = 8
    max_channels: int = 32
    depth: int = 6
    head: str = "avg_pool_fc"
    fc_widths: str = "5000,1000,2"
    dropout_layers: int = 3
    dropout_rate: float = 0.5
    leaky_slope: float = 0.2
    init_std: float = 0.02
    # optimiser and schedule
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 1e-6
    decay_factor: float = 0.9
    decay_interval: int = 20000
    lr_floor: float = 1e-5
    # training
    epochs: int = 30
    batch_size: int = 4
    augment: bool = True
    train_good: int = 44
    train_bad: int = 30
    folds: int = 5
    # data generation
    n_good: int = 54
    n_bad: int = 40
    noise_std: float = 0.04
    # weak segmentation; element_size 0 scales 20 px at 250 to the image size
    tau: float = DEFAULT_TAU
    element_size: int = 0
    single_thread: bool = True

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size,
            base_channels=self.base_channels,
            max_channels=self.max_channels,
            depth=self.depth,
            head=self.head,
            fc_baseline_widths=parse_int_list(self.fc_widths),
            dropout_layers=self.dropout_layers,
            dropout_rate=self.dropout_rate,
            leaky_slope=self.leaky_slope,
            init_std=self.init_std,
            seed=self.seed,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs,
            batch_size=self.batch_size,
            augment=self.augment,
            seed=self.seed,
            alpha=self.alpha,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_epsilon=self.adam_epsilon,
            weight_decay=self.weight_decay,
            decay_factor=self.decay_factor,
            decay_interval=self.decay_interval,
            lr_floor=self.lr_floor,
        )

    def synthetic_params(self) -> SyntheticParams:
        return SyntheticParams(image_size=self.input_size, noise_std=self.noise_std, seed=self.seed)

    def element(self, image_size: Optional[int] = None) -> StructuringElement:
        if self.element_size > 0:
            return StructuringElement.square(self.element_size)
        return StructuringElement.for_image(image_size or self.input_size)

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.tau < 1:
            raise ConfigurationError("tau must lie in (0, 1)")
        if self.element_size < 0:
            raise ConfigurationError("element_size must be >= 0")
        if self.n_good < 0 or self.n_bad < 0:
            raise ConfigurationError("image counts must be non-negative")
        self.model_config().validate()
        self.train_settings().optimizer()


def parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from exc


def _coerce(name: str, kind, raw: Any):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigurationError(f"{name}: cannot parse {raw!r}") from exc
    return text


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def read_config_file(path) -> dict[str, str]:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {path} not found")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def resolve(
    file_values: Mapping[str, Any] | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    profile = overrides.get("profile") or file_values.get("profile") or "desk"
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    merged: dict[str, Any] = {"profile": profile, **PROFILES[profile]}
    merged.update(file_values)
    merged.update(overrides)
    for key in merged:
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"unknown setting {key!r}")
    cfg = RunConfig(**{k: _coerce(k, _FIELD_TYPES[k], v) for k, v in merged.items()})
    cfg.validate()
    return cfg


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())
