"""Experiment configuration: flat ``key=value`` text, one key per line, ``#`` comments."""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

from snde.systems import SYSTEM_NAMES, get_system
from snde.training import TrainingConfig, config_items

EVAL_MODELS = ("checkpoint", "ground-truth")


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


def default_eval_horizon(system: str) -> float:
    if system == "two_body":
        return 200.0
    if system == "double_pendulum_hybrid":
        return 60.0
    return 10.0 * get_system(system).horizon


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    training: TrainingConfig
    out_dir: str = "out"
    eval_horizon: float = 150.0
    n_test_trials: int = 100
    gamma_sweep: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
    eval_model: str = "checkpoint"
    measure_horizon: float = 600.0
    burn_in: float = 10.0
    grid_bins: int = 20
    grid_margin: float = 0.1

    def __post_init__(self):
        if self.eval_horizon <= 0 or self.measure_horizon <= 0:
            raise ConfigError("horizons must be positive")
        if self.n_test_trials < 1:
            raise ConfigError("n_test_trials must be >= 1")
        if any(not g >= 0 for g in self.gamma_sweep):
            raise ConfigError("gamma_sweep entries must be >= 0")
        if self.eval_model not in EVAL_MODELS:
            raise ConfigError(f"eval_model must be one of {EVAL_MODELS}")
        if not 0 <= self.burn_in < self.measure_horizon:
            raise ConfigError("need 0 <= burn_in < measure_horizon")
        if self.grid_bins < 1 or self.grid_margin < 0:
            raise ConfigError("invalid measure grid")

    @property
    def system(self) -> str:
        return self.training.system

    @property
    def seed(self) -> int:
        return self.training.seed

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or training keys changed."""
        train_keys = {f.name for f in dataclasses.fields(TrainingConfig)}
        t = {k: v for k, v in changes.items() if k in train_keys}
        rest = {k: v for k, v in changes.items() if k not in train_keys}
        training = dataclasses.replace(self.training, **t) if t else self.training
        return dataclasses.replace(self, training=training, **rest)

    def check_writable(self) -> None:
        path = Path(self.out_dir)
        path.mkdir(parents=True, exist_ok=True)
        if not os.access(path, os.W_OK):
            raise ConfigError(f"output directory {path} is not writable")


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainingConfig)}
_EXP_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "training"}


def _convert(name: str, text: str):
    kind = _EXP_FIELDS[name].type
    if kind == "float":
        return float(text)
    if kind == "int":
        return int(text)
    if kind.startswith("tuple"):
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


def read_items(text: str, source: str = "<config>") -> list[tuple[int, str, str]]:
    items, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TRAIN_FIELDS and key not in _EXP_FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        items.append((lineno, key, value))
    return items


def config_from_text(text: str, source: str = "<config>", overrides: dict | None = None) -> ExperimentConfig:
    """Parse config text; missing keys come from the system's defaults.

    ``overrides`` (already typed values) win over file values.
    """
    overrides = dict(overrides or {})
    items = read_items(text, source)
    values = {k: (n, v) for n, k, v in items}
    system = overrides.pop("system", None) or values.pop("system", (0, None))[1]
    values.pop("system", None)
    if system is None:
        raise ConfigError(f"{source}: no system given")
    if system not in SYSTEM_NAMES:
        raise ConfigError(f"{source}: unknown system {system!r}; choose from {', '.join(SYSTEM_NAMES)}")

    train_vals, exp_vals = {}, {"eval_horizon": default_eval_horizon(system)}
    for key, (lineno, text_value) in values.items():
        try:
            if key in _TRAIN_FIELDS:
                train_vals[key] = _coerce_train(key, text_value)
            else:
                exp_vals[key] = _convert(key, text_value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    for key, value in overrides.items():
        if value is None:
            continue
        (train_vals if key in _TRAIN_FIELDS else exp_vals)[key] = value
    try:
        training = TrainingConfig.for_system(system, **train_vals)
        return ExperimentConfig(training=training, **exp_vals)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _coerce_train(key: str, text: str):
    kind = _TRAIN_FIELDS[key].type
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def parse_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return config_from_text(text, str(path), overrides)


def serialize(config: ExperimentConfig, *, include_out_dir: bool = True) -> str:
    """Complete config text; parsing it yields an equal config.

    With ``include_out_dir=False`` the output location is left out, so the
    snapshot stored inside a run directory does not depend on where it lives.
    """
    lines = [f"{k}={v}" for k, v in config_items(config.training)]
    for name in _EXP_FIELDS:
        if name == "out_dir" and not include_out_dir:
            continue
        value = getattr(config, name)
        if isinstance(value, tuple):
            value = ",".join(repr(float(g)) for g in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name}={value}")
    return "\n".join(lines) + "\n"
