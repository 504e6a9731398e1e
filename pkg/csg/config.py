"""
Pipeline configuration.

Configuration is a tree of dataclasses, one per pipeline stage. Values come from
the dataclass defaults, then a config file, then command-line flags. Two file
grammars are accepted:

- YAML (``.yaml`` / ``.yml``), sections matching the dataclass tree;
- ``key = value`` text with dotted keys, e.g. ``training.learning_rate = 0.01``.

String values may reference the environment as ``${NAME:-default}``; a ``.env``
file in the working directory is loaded first.
"""

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml
from dotenv import load_dotenv

from .errors import ConfigError
from .evaluation import EvaluationConfig
from .gconv_net import NetworkConfig
from .mrf_regularizer import MrfConfig
from .spectral_alignment import AlignmentConfig
from .spectral_embedding import EmbeddingConfig
from .surface_graph import SynthConfig
from .trainer import TrainConfig

_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")

MODES = ("euclidean", "spectral", "pointwise")


@dataclass
class RuntimeConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    workers: int = 1
    modes: Tuple[str, ...] = MODES
    seed: int = 0
    checkpoint_format: str = "binary"


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    mrf: MrfConfig = field(default_factory=MrfConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def validate(self) -> None:
        for mode in self.runtime.modes:
            if mode not in MODES:
                raise ConfigError(f"Unknown mode '{mode}'; expected one of {list(MODES)}")
        if self.runtime.workers < 1:
            raise ConfigError(f"runtime.workers must be >= 1, got {self.runtime.workers}")
        if self.runtime.checkpoint_format not in ("binary", "json"):
            raise ConfigError(
                f"runtime.checkpoint_format must be 'binary' or 'json', "
                f"got '{self.runtime.checkpoint_format}'"
            )
        self.network.validate()
        self.training.validate()
        if self.network.n_parcels != self.synth.n_parcels:
            raise ConfigError(
                f"network.n_parcels ({self.network.n_parcels}) must equal "
                f"synth.n_parcels ({self.synth.n_parcels})"
            )


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def expand_env(text: str) -> str:
    """Replace ``${NAME:-default}`` references with environment values."""

    def _sub(match):
        name, default = match.group(1), match.group(2)
        value = os.getenv(name)
        if value is None:
            if default is None:
                raise ConfigError(f"Environment variable {name} is not set and has no default")
            return default
        return value

    return _ENV_PATTERN.sub(_sub, text)


def parse_key_value(text: str, source: str = "<config>") -> Dict[str, Any]:
    """Parse ``section.key = value`` lines into a nested dict."""
    tree: Dict[str, Any] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{line_no}: empty key")
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}:{line_no}: '{key}' conflicts with a scalar key")
        node[parts[-1]] = yaml.safe_load(value) if value else None
    return tree


def _coerce(value: Any, default: Any, key: str) -> Any:
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            value = [value]
        if default:
            return tuple(_coerce(v, default[0], key) for v in value)
        return tuple(value)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(as_float)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, str):
        return str(value)
    return value


def _apply(target, overrides: Dict[str, Any], prefix: str = "") -> None:
    names = {f.name: f for f in dataclasses.fields(target)}
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"Unknown configuration key '{dotted}'")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"'{dotted}' is a section; expected a mapping")
            _apply(current, value, prefix=f"{dotted}.")
        else:
            setattr(target, key, _coerce(value, current, dotted))


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Build a PipelineConfig from defaults, an optional file and flag overrides."""
    load_dotenv()
    config = PipelineConfig()

    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"Config file not found: {p}")
        text = expand_env(p.read_text(encoding="utf-8"))
        if p.suffix.lower() in (".yaml", ".yml"):
            try:
                tree = yaml.safe_load(text) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Invalid YAML in {p}: {e}") from e
            if not isinstance(tree, dict):
                raise ConfigError(f"{p}: top level must be a mapping")
        else:
            tree = parse_key_value(text, source=str(p))
        _apply(config, tree)

    if overrides:
        _apply(config, overrides)

    config.validate()
    return config
