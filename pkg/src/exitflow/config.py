"""Run configuration: a TOML document mapped onto frozen dataclasses.

Unknown keys are hard errors (sweep typos must not pass silently), every
numeric field is range-checked at load, and the resolved config has a
stable content hash that all downstream artifacts embed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - python < 3.11
    import tomli as tomllib

from .calibrate import METRICS
from .engine import CostModel
from .task import SyntheticTaskSpec

CONFIG_VERSION = 1

MODEL_KINDS = ("toy", "oracle")
SUPERVISION_MODES = ("all_exits", "random_exit")
DISTRIBUTION_KINDS = ("exponential", "gaussian", "gamma")
HEAD_KINDS = ("mlp", "fm")


class ConfigError(ValueError):
    """Malformed or out-of-range run configuration."""


@dataclass(frozen=True)
class RunMeta:
    name: str = "run"
    seed: int = 0

    def __post_init__(self):
        if not self.name:
            raise ConfigError("run.name must be non-empty")
        if self.seed < 0:
            raise ConfigError("run.seed must be a non-negative integer")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "toy"
    n_layers: int = 8
    width: int = 32
    tap_stride: int = 2
    heads: tuple[str, ...] = ("mlp", "fm")
    # layered-oracle knobs; ignored by kind="toy"
    gamma: float = 0.5
    zeta: float = 0.1
    mixture_std: float = 0.05
    mlp_steps: int = 8

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {MODEL_KINDS}")
        if self.n_layers < 2:
            raise ConfigError("model.n_layers must be at least 2")
        if self.width < 1:
            raise ConfigError("model.width must be positive")
        if not 1 <= self.tap_stride <= self.n_layers:
            raise ConfigError("model.tap_stride out of range")
        object.__setattr__(self, "heads", tuple(self.heads))
        if not self.heads or any(h not in HEAD_KINDS for h in self.heads):
            raise ConfigError(f"model.heads must be drawn from {HEAD_KINDS}")
        if len(set(self.heads)) != len(self.heads):
            raise ConfigError("model.heads contains duplicates")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("model.gamma must lie in (0, 1]")
        if self.zeta < 0.0:
            raise ConfigError("model.zeta must be non-negative")
        if self.mixture_std <= 0.0:
            raise ConfigError("model.mixture_std must be positive")
        if self.mlp_steps < 1:
            raise ConfigError("model.mlp_steps must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 2000
    warmup_steps: int = 100
    lr: float = 3e-3
    weight_decay: float = 0.01
    p_mask: float = 0.5
    supervision: str = "random_exit"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if self.steps < 0:
            raise ConfigError("train.steps must be non-negative")
        if self.warmup_steps < 0:
            raise ConfigError("train.warmup_steps must be non-negative")
        if self.lr <= 0.0:
            raise ConfigError("train.lr must be positive")
        if self.weight_decay < 0.0:
            raise ConfigError("train.weight_decay must be non-negative")
        if not 0.0 <= self.p_mask <= 1.0:
            raise ConfigError("train.p_mask must lie in [0, 1]")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(
                f"train.supervision must be one of {SUPERVISION_MODES}")


@dataclass(frozen=True)
class CalibrationConfig:
    metric: str = "l2"
    distribution: str = "exponential"
    c: float = 0.5
    sigma: float = 1.0
    scale: float = 1.0
    mode: str = "renormalized"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"calibration.metric must be one of {METRICS}")
        if self.distribution not in DISTRIBUTION_KINDS:
            raise ConfigError("calibration.distribution must be one of "
                              f"{DISTRIBUTION_KINDS}")
        if self.c <= 0.0:
            raise ConfigError("calibration.c must be positive")
        if self.sigma <= 0.0:
            raise ConfigError("calibration.sigma must be positive")
        if self.scale <= 0.0:
            raise ConfigError("calibration.scale must be positive")
        if self.mode not in ("literal", "renormalized"):
            raise ConfigError(
                "calibration.mode must be 'literal' or 'renormalized'")


@dataclass(frozen=True)
class RuntimeConfig:
    head: str = "fm"
    n_steps: int = 10
    warm_start: bool = True

    def __post_init__(self):
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"runtime.head must be one of {HEAD_KINDS}")
        if self.n_steps < 1:
            raise ConfigError("runtime.n_steps must be at least 1")


@dataclass(frozen=True)
class BenchConfig:
    c_grid: tuple[float, ...] = (1.0, 0.8, 0.7, 0.4, 0.1)
    n_steps_grid: tuple[int, ...] = (10, 2)
    warm_grid: tuple[bool, ...] = (True, False)

    def __post_init__(self):
        object.__setattr__(self, "c_grid", tuple(self.c_grid))
        object.__setattr__(self, "n_steps_grid", tuple(self.n_steps_grid))
        object.__setattr__(self, "warm_grid", tuple(self.warm_grid))
        if not self.c_grid or any(c <= 0.0 for c in self.c_grid):
            raise ConfigError("bench.c_grid entries must be positive")
        if not self.n_steps_grid or any(n < 1 for n in self.n_steps_grid):
            raise ConfigError("bench.n_steps_grid entries must be >= 1")
        if not self.warm_grid:
            raise ConfigError("bench.warm_grid must be non-empty")


@dataclass(frozen=True)
class RunConfig:
    run: RunMeta = field(default_factory=RunMeta)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    cost: CostModel = field(default_factory=CostModel)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, run=dataclasses.replace(self.run, seed=seed))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            out[f.name] = {sf.name: _plain(getattr(section, sf.name))
                           for sf in fields(section)}
        return out


def _plain(value):
    if isinstance(value, tuple):
        return list(value)
    return value


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _build_section(name: str, factory, data: dict):
    allowed = {f.name for f in fields(factory)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    coerced = {}
    for f in fields(factory):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(v)
        coerced[f.name] = v
    try:
        return factory(**coerced)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name, factory in _SECTIONS.items():
        sub = data.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, factory, sub)
    return RunConfig(**sections)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    """Stable 16-hex-digit digest of the fully-resolved config."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
