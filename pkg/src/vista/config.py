"""Hyperparameters and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class VistaConfig:
    # interventions
    lfccs_ratio: float = 0.10
    entropy_quantile: float = 0.95
    dilation: int = 5  # 15 on 160x192x160 volumes
    shared_pair: bool = False
    use_lfccs: bool = True
    use_ugps: bool = True
    # gates and losses
    tau_var: float = 0.05
    tau_pos: float = 0.95
    tau_neg: float = 0.05
    lam: float = 1.0
    use_pl: bool = True
    use_var_gate: bool = True
    pl_reduction: str = "mean"
    # optimization
    steps: int = 10
    lr: float = 1e-4
    ema_alpha: float = 0.99
    ema_per_step: bool = True
    freeze_bn_stats: bool = True
    student_norm: str = "running"
    reset_optimizer_per_case: bool = False
    num_views: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau_neg < self.tau_pos < 1.0:
            raise ConfigError(f"need 0 < tau_neg < tau_pos < 1, got {self.tau_neg}, {self.tau_pos}")
        if not self.tau_var > 0:
            raise ConfigError(f"tau_var must be positive, got {self.tau_var}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lam must be a finite non-negative number, got {self.lam}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError(f"ema_alpha must be in (0, 1), got {self.ema_alpha}")
        if not 0.0 <= self.lfccs_ratio <= 1.0:
            raise ConfigError(f"lfccs_ratio must be in [0, 1], got {self.lfccs_ratio}")
        if not 0.0 < self.entropy_quantile < 1.0:
            raise ConfigError(f"entropy_quantile must be in (0, 1), got {self.entropy_quantile}")
        if self.dilation < 1 or self.dilation % 2 == 0:
            raise ConfigError(f"dilation must be an odd integer >= 1, got {self.dilation}")
        if self.num_views != 3:
            raise ConfigError("exactly 3 views are supported")
        if self.pl_reduction not in ("mean", "sum"):
            raise ConfigError(f"pl_reduction must be 'mean' or 'sum', got {self.pl_reduction!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.student_norm not in ("batch", "running"):
            raise ConfigError(f"student_norm must be 'batch' or 'running', got {self.student_norm!r}")
        if not (self.use_lfccs or self.use_ugps):
            raise ConfigError("at least one intervention must be enabled")

    def replace(self, **changes: Any) -> "VistaConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    out_channels: int = 3
    depth: int = 3
    base_channels: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# flat config files


def _parse_value(raw: str) -> Any:
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low == "null":
        return None
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("\"'")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if value is None:
        return "null"
    return str(value)


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = _parse_value(value)
    version = out.pop("schema_version", None)
    if version is None:
        raise ConfigError(f"{path}: missing key 'schema_version'")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema_version {version}")
    return out


def write_config_file(path: str | Path, values: dict[str, Any]) -> None:
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    lines += [f"{k} = {_format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def config_from_mapping(cls, values: dict[str, Any], prefix: str = ""):
    """Build a config dataclass from the keys of ``values`` that start with ``prefix``."""
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        if names[name].type in ("float",) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)
