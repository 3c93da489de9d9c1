"""Configuration dataclasses, JSON loading and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field

from .data import ConfigError, ScenarioConfig

PADDING_MODES = ("none", "zero", "replicate")
MEMORY_MODES = ("bidirectional", "forward")


@dataclass
class TrackerConfig:
    L: int = 8
    N: int = 128
    M: int = 64
    k: int = 8
    temporal_kernel: int = 3
    temporal_stride: int = 1
    padding: str = "replicate"
    sigma: float = 2.0
    K_top: int = 16
    C: int = 32
    C_m: int = 64
    C_out: int = 128
    heads: int = 4
    pool_k: int = 8
    crop_margin: float = 2.0
    in_channels: int = 1
    memory_mode: str = "bidirectional"
    use_mask: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.L < 2:
            raise ConfigError("tracker.L must be >= 2")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ConfigError("tracker.temporal_kernel must be odd")
        if self.temporal_stride < 1:
            raise ConfigError("tracker.temporal_stride must be >= 1")
        if self.padding not in PADDING_MODES:
            raise ConfigError(f"tracker.padding must be one of {PADDING_MODES}")
        if self.memory_mode not in MEMORY_MODES:
            raise ConfigError(f"tracker.memory_mode must be one of {MEMORY_MODES}")
        if self.sigma <= 0:
            raise ConfigError("tracker.sigma must be > 0")
        if not 1 <= self.K_top <= min(self.N, self.M):
            raise ConfigError("tracker.K_top must lie in [1, min(N, M)]")
        if not 1 <= self.k < self.M:
            raise ConfigError("tracker.k must lie in [1, M-1]")
        if self.C_out % self.heads:
            raise ConfigError("tracker.C_out must be divisible by tracker.heads")
        if self.padding == "none" and self.L < self.temporal_kernel:
            raise ConfigError("padding 'none' needs L >= temporal_kernel")
        if min(self.N, self.M, self.C, self.C_m, self.C_out, self.pool_k) < 1:
            raise ConfigError("tracker widths must be positive")
        if self.crop_margin < 0:
            raise ConfigError("tracker.crop_margin must be >= 0")


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    # step-size halvings happen at these fractions of the run
    lr_decay_at: tuple[float, float] = (0.6, 0.85)
    eval_every: int = 500
    center_jitter: float = 0.3
    heading_jitter: float = 0.05
    positive_radius: float = 0.3
    w_mask: float = 1.0
    w_vote: float = 1.0
    w_objectness: float = 1.0
    w_box: float = 1.0
    grad_clip: float = 10.0
    seed: int = 0


@dataclass
class BenchmarkConfig:
    num_train: int = 300
    num_eval: int = 50
    occlusion_prob: float = 0.5
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    seed: int = 0

    def validate(self) -> None:
        self.tracker.validate()
        self.benchmark.scenario.validate()
        if self.benchmark.num_train < 0 or self.benchmark.num_eval < 0:
            raise ConfigError("benchmark counts must be >= 0")
        if not 0 <= self.benchmark.occlusion_prob <= 1:
            raise ConfigError("benchmark.occlusion_prob must lie in [0, 1]")
        if self.train.steps < 0 or self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train.steps/batch_size/lr out of range")


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        return from_dict(tp, value, prefix=key + ".")
    if tp is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if tp is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            f = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if f != int(f):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(f)
    if tp is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if isinstance(value, str):
            value = json.loads(value)
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values")
        return tuple(_coerce(a, v, key) for a, v in zip(args, value))
    if origin is dict:
        if isinstance(value, str):
            value = json.loads(value)
        kt, vt = typing.get_args(tp)
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected an object")
        return {_coerce(kt, k, key): _coerce(vt, v, key) for k, v in value.items()}
    raise ConfigError(f"{key}: unsupported type {tp}")


def from_dict(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + u for u in sorted(unknown))}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def apply_override(cfg, dotted: str, value) -> None:
    """Set ``a.b.c=value`` on nested dataclasses, type-checked against the field."""
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key: {dotted}")
        obj = getattr(obj, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or leaf not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key: {dotted}")
    tp = typing.get_type_hints(type(obj))[leaf]
    if isinstance(value, str) and tp not in (str,) and (value.startswith("[") or value.startswith("{")):
        value = json.loads(value)
    setattr(obj, leaf, _coerce(tp, value, dotted))


def load_run_config(path: str | os.PathLike | None = None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = from_dict(RunConfig, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        apply_override(cfg, key.strip(), value.strip())
    cfg.validate()
    return cfg


def json_schema(cls=RunConfig) -> dict:
    """JSON schema of a config dataclass (objects reject unknown keys)."""
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        props[f.name] = _schema_for(hints[f.name])
    return {"type": "object", "properties": props, "additionalProperties": False}


def _schema_for(tp) -> dict:
    if dataclasses.is_dataclass(tp):
        return json_schema(tp)
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    if tp is str:
        return {"type": "string"}
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        return {"type": "array", "items": [_schema_for(a) for a in args],
                "minItems": len(args), "maxItems": len(args)}
    if origin is dict:
        return {"type": "object", "additionalProperties": _schema_for(typing.get_args(tp)[1])}
    raise TypeError(tp)
