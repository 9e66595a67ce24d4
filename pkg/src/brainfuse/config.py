"""Experiment-wide configuration document (YAML or JSON).

Every field has a default, so an empty file is a valid config. Unknown keys
and ill-typed values are rejected with :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthConfig
from .errors import ConfigError
from .model import AblationSwitches
from .preprocess import AugmentConfig, PreprocessConfig
from .segnet import NetworkConfig
from .semantic import SemanticConfig
from .train import LossWeights, TrainConfig

SCHEMA_VERSION = 1
ABLATION_TABLE_NAMES = ("fusion_ablation", "feature_extraction", "semantic_ablation", "tissue_analysis")


@dataclass
class AblationConfig:
    tables: tuple[str, ...] = ABLATION_TABLE_NAMES
    folds_to_run: int | None = 1

    def __post_init__(self) -> None:
        self.tables = tuple(self.tables)
        bad = set(self.tables) - set(ABLATION_TABLE_NAMES)
        if bad:
            raise ConfigError(f"unknown ablation tables {sorted(bad)}; choose from {ABLATION_TABLE_NAMES}")


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    semantic: SemanticConfig = field(default_factory=SemanticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SynthConfig = field(default_factory=SynthConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    switches: AblationSwitches = field(default_factory=AblationSwitches)

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; expected {SCHEMA_VERSION}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def set_seed(self, seed: int) -> None:
        self.train.seed = seed
        self.synthetic.seed = seed
        self.semantic.encoder_seed = seed


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, where)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError:
                continue
        raise ConfigError(f"{where}: cannot interpret {value!r} as {tp}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, doc, where: str = "config"):
    """Build dataclass ``cls`` from a nested mapping, checking names and types."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(doc).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})".replace("\n", " ")) from exc
    return from_dict(ExperimentConfig, doc or {}, "config")


def load_switches(spec: str | Path | None) -> AblationSwitches:
    """Switches from a preset name (``base``) or a YAML/JSON file."""
    if spec is None or str(spec) == "base":
        return AblationSwitches()
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"switches {spec!r} is neither 'base' nor an existing file")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON") from exc
    return from_dict(AblationSwitches, doc or {}, "switches")


__all__ = [
    "ABLATION_TABLE_NAMES", "AblationConfig", "ExperimentConfig", "LossWeights", "SCHEMA_VERSION",
    "from_dict", "load_config", "load_switches",
]
