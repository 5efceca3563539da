"""Run configuration: one JSON document, overridable key by key.

Precedence is command-line flag > config file > built-in default. Keys
are addressed with dotted paths such as ``finetune.epochs``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .augmentation import AugmentationConfig
from .errors import ConfigError, ValidationError
from .evaluation import EvalConfig
from .graph_store import resolve_granularity
from .propagation import PropagationConfig
from .training import TrainConfig

CONFIG_ENV = "GRAPHSASA_CONFIG"
PRECISIONS = ("float64", "float32")


@dataclass
class SyntheticConfig:
    n_users: int = 500
    n_items: int = 1000
    n_snapshots: int = 8
    edges_per_snapshot: int = 4000
    power_exponent: float = 2.0
    drift_rate: float = 0.2
    seed: int = 0
    n_communities: int = 8
    affinity: float = 0.8


@dataclass
class DataConfig:
    """Either an edge-stream ``path`` or the synthetic generator."""

    path: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    granularity: str | int = "daily"
    n_pretrain: int | None = 4
    n_users: int | None = None
    n_items: int | None = None


def _pretrain_defaults():
    return TrainConfig(learning_rate=0.01, epochs=10, batch_size=1024, mode="pretrain")


def _finetune_defaults():
    return TrainConfig(learning_rate=0.01, epochs=5, batch_size=1024, mode="finetune", dropout=0.1)


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    dim: int = 64
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    finetune: TrainConfig = field(default_factory=_finetune_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    precision: str = "float64"
    threads: int = 1

    def validate(self) -> "RunConfig":
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.eval.rank > self.dim:
            raise ConfigError(f"adapter rank {self.eval.rank} exceeds embedding dimension {self.dim}")
        resolve_granularity(self.data.granularity)
        if self.data.path is not None and not Path(self.data.path).is_file():
            raise ValidationError(f"dataset path {self.data.path} does not exist")
        # re-run each section's own checks after overrides
        for section in (self.propagation, self.augmentation, self.pretrain, self.finetune, self.eval):
            section.__post_init__()
        if self.pretrain.mode != "pretrain" or self.finetune.mode != "finetune":
            raise ConfigError("pretrain/finetune sections must keep their own mode")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def seed_all(self, seed: int) -> None:
        self.data.synthetic.seed = seed
        self.propagation.seed = seed
        self.pretrain.seed = seed
        self.finetune.seed = seed


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table, got {value!r}")
        return _build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: bad value {value!r}")
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, doc: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(f'{where}{k}' for k in unknown)}")
    default = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in doc:
            value = doc[f.name]
            sub = getattr(default, f.name)
            if dataclasses.is_dataclass(sub) and isinstance(value, dict):
                # merge over the field's own defaults (e.g. finetune mode)
                merged = dataclasses.asdict(sub)
                _deep_update(merged, value)
                value = merged
            kwargs[f.name] = _coerce(value, hints[f.name], f"{where}{f.name}.")
    try:
        return dataclasses.replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def config_from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc).validate()


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is read as JSON, falling back to a plain string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=(), env=os.environ) -> RunConfig:
    """Defaults, then the config file (``path`` or ``$GRAPHSASA_CONFIG``), then overrides."""
    doc: dict = {}
    path = path or env.get(CONFIG_ENV)
    if path:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    seed = None
    for keys, value in overrides:
        if keys == ["seed"]:
            seed = value
            continue
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {'.'.join(keys)}: {k} is not a table")
        node[keys[-1]] = value
    cfg = config_from_dict(doc)
    if seed is not None:
        cfg.seed_all(_coerce(seed, int, "seed"))
    return cfg
