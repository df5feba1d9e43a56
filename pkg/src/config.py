#!/usr/bin/env python3
"""
YAML configuration, dotted overrides and run manifests

A config file is a mapping with optional sections world, train, ms,
samplers and eval. `--set section.key=value` overrides are parsed with
YAML so numbers, booleans and lists keep their types.
"""

import copy
import json
import logging
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from .errors import ConfigError
from .fileio import atomic_write
from .msloss import MsParams
from .samplers import SamplerConfig
from .trainer import TrainConfig
from .worldgen import WorldConfig

logger = logging.getLogger(__name__)

SECTIONS = ('world', 'train', 'ms', 'samplers', 'eval')
MANIFEST_NAME = 'manifest.json'


@dataclass
class EvalConfig:
    """Evaluation defaults for the eval and bench-knn commands"""
    protocol: str = 'vpr'
    ks: Tuple[int, ...] = (1, 10)
    threshold_m: float = 25.0
    splits: Tuple[str, ...] = ('E', 'M', 'H')
    memory_budget: int = 256 * 1024 * 1024
    easy_angle: float = 45.0
    method: str = 'multiloc'
    dataset: str = 'synthetic'

    def __post_init__(self):
        if self.protocol not in ('vpr', 'landmark'):
            raise ConfigError(f"protocol must be 'vpr' or 'landmark', got {self.protocol!r}")


def load_config(path: Union[str, Path, None] = None) -> Dict[str, Dict[str, Any]]:
    """Read a YAML config file; no path gives an empty config"""
    if path is None:
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {', '.join(unknown)}")
    for name, section in raw.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"{path}: section '{name}' must be a mapping")
    return {name: dict(section or {}) for name, section in raw.items()}


def apply_overrides(config: Dict[str, Dict[str, Any]], overrides: Sequence[str]) -> Dict[str, Dict[str, Any]]:
    """Return a copy with `section.key=value` assignments applied"""
    merged = copy.deepcopy(config)
    for item in overrides or ():
        if '=' not in item:
            raise ConfigError(f"Override {item!r} must look like section.key=value")
        key, raw_value = item.split('=', 1)
        section, _, name = key.strip().partition('.')
        if section not in SECTIONS or not name:
            raise ConfigError(f"Override key {key!r} must be one of {', '.join(SECTIONS)} followed by .key")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse override value {raw_value!r}: {e}") from e
        merged.setdefault(section, {})[name] = value
    return merged


def _coerce(value: Any, default: Any, name: str) -> Any:
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, tuple):
        return tuple(value) if isinstance(value, (list, tuple)) else (value,)
    return value


def build_section(cls, values: Optional[Dict[str, Any]], section: str):
    """Instantiate a config dataclass from one section, coercing scalars to the field types"""
    values = dict(values or {})
    known = {f.name: f for f in fields(cls) if f.init}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"Unknown key(s) in section '{section}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        f = known[name]
        default = f.default if f.default is not MISSING else (
            f.default_factory() if f.default_factory is not MISSING else None)
        kwargs[name] = _coerce(value, default, f"{section}.{name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid section '{section}': {e}") from e


def world_config(config: Dict[str, Dict[str, Any]]) -> WorldConfig:
    return build_section(WorldConfig, config.get('world'), 'world')


def ms_params(config: Dict[str, Dict[str, Any]]) -> MsParams:
    values = dict(config.get('ms') or {})
    if 'lambda' in values:
        values['lambda_'] = values.pop('lambda')
    return build_section(MsParams, values, 'ms')


def train_config(config: Dict[str, Dict[str, Any]]) -> TrainConfig:
    values = dict(config.get('train') or {})
    for nested in ('ms_params', 'samplers'):
        if nested in values:
            raise ConfigError(f"Use the '{'ms' if nested == 'ms_params' else nested}' section, not train.{nested}")
    train = build_section(TrainConfig, values, 'train')
    train.ms_params = ms_params(config)
    train.samplers = build_section(SamplerConfig, config.get('samplers'), 'samplers')
    return train


def eval_config(config: Dict[str, Dict[str, Any]]) -> EvalConfig:
    return build_section(EvalConfig, config.get('eval'), 'eval')


def snapshot(config: Dict[str, Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    """Fully resolved config: every section with defaults filled in"""
    train = train_config(config)
    return {
        'world': world_config(config).to_dict(),
        'train': {k: v for k, v in train.to_dict().items() if k not in ('ms_params', 'samplers')},
        'ms': train.ms_params.to_dict(),
        'samplers': asdict(train.samplers),
        'eval': {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(eval_config(config)).items()},
    }


@dataclass
class RunManifest:
    """What a command ran with and what it produced"""
    subcommand: str
    config: Dict[str, Any]
    seed: Optional[int]
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = ''

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + '\n'

    def write(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / MANIFEST_NAME
        atomic_write(path, self.to_json().encode('utf-8'))
        logger.info(f"Manifest written to {path}")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'RunManifest':
        with open(path, 'r', encoding='utf-8') as f:
            return cls(**json.load(f))
