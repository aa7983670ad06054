"""
Session configuration.

Settings come from built-in defaults, optionally overridden by a YAML file
(``--config``) and finally by CLI flags. Secrets are never stored in the file;
only the names of the environment variables holding them.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union, get_args, get_origin, get_type_hints

import yaml

from .llm_handler import MODES, REPLAY, CompletionConfig
from .utils import ValidationError, canonical_label, logger

PROVIDERS = ("hash", "remote")
POOLINGS = ("micro", "macro")
AVERAGINGS = ("per_image", "pooled")
GRID_SIZE = 3


@dataclass
class EmbeddingConfig:
    provider: str = "hash"
    dim: int = 512
    seed: int = 0
    url: Optional[str] = None
    model: str = "text2vec-base-multilingual"
    api_key_env: str = "SCENERAG_EMBEDDING_KEY"
    auth_header: str = "Authorization"
    timeout: float = 30.0
    batch_size: int = 32
    max_in_flight: int = 4
    dimension: Optional[int] = None

    def validate(self) -> List[str]:
        errors = []
        if self.provider not in PROVIDERS:
            errors.append(f"embedding provider must be one of {PROVIDERS}, got '{self.provider}'")
        if self.provider == "remote" and not self.url:
            errors.append("remote embedding provider needs a url")
        if self.provider == "hash" and self.dim < 8:
            errors.append(f"hash embedding dim must be >= 8, got {self.dim}")
        if self.timeout <= 0:
            errors.append(f"embedding timeout must be > 0, got {self.timeout}")
        if self.batch_size < 1:
            errors.append(f"embedding batch_size must be >= 1, got {self.batch_size}")
        if self.max_in_flight < 1:
            errors.append(f"embedding max_in_flight must be >= 1, got {self.max_in_flight}")
        return errors


@dataclass
class SessionConfig:
    """
    Everything a question or evaluation session needs.

    ``grid`` is fixed at 3; it is carried so reports can state it.
    """

    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    k: int = 4
    grid: int = GRID_SIZE
    mode: str = "live"
    cassette: Optional[str] = None
    dataset: Optional[str] = None
    questions: Optional[str] = None
    output: Optional[str] = None
    report: Optional[str] = None
    synonyms: Optional[str] = None
    seed: int = 0
    workers: int = 4
    pooling: str = "micro"
    averaging: str = "per_image"
    threshold: float = 0.55
    cache_index: bool = False
    dataset_name: str = "dataset"

    def validate(self) -> None:
        """
        Check all settings at once.

        Raises:
            ValidationError: listing every invalid setting
        """
        errors = self.embedding.validate() + self.completion.validate()
        if self.k < 1:
            errors.append(f"k must be >= 1, got {self.k}")
        if self.grid != GRID_SIZE:
            errors.append(f"grid is fixed at {GRID_SIZE}x{GRID_SIZE}, got {self.grid}")
        if self.workers < 1:
            errors.append(f"workers must be >= 1, got {self.workers}")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.mode == REPLAY and (not self.cassette or not Path(self.cassette).exists()):
            errors.append(f"replay mode needs an existing cassette, got {self.cassette!r}")
        if self.mode == "record" and not self.cassette:
            errors.append("record mode needs a cassette path")
        if self.pooling not in POOLINGS:
            errors.append(f"pooling must be one of {POOLINGS}, got '{self.pooling}'")
        if self.averaging not in AVERAGINGS:
            errors.append(f"averaging must be one of {AVERAGINGS}, got '{self.averaging}'")
        if not 0.0 <= self.threshold <= 1.0:
            errors.append(f"threshold must lie in [0, 1], got {self.threshold}")
        for name in ("dataset", "questions", "synonyms"):
            value = getattr(self, name)
            if value and not Path(value).exists():
                errors.append(f"{name} path does not exist: {value}")
        if errors:
            raise ValidationError(errors, context="config")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _accepts(expected: Any, value: Any) -> bool:
    if get_origin(expected) is Union:
        return any(_accepts(option, value) for option in get_args(expected))
    if expected is type(None):
        return value is None
    if isinstance(value, bool):
        return expected is bool
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def _type_name(expected: Any) -> str:
    if get_origin(expected) is Union:
        return " or ".join(_type_name(option) for option in get_args(expected))
    return "null" if expected is type(None) else expected.__name__


def _merge(target: Any, values: Dict[str, Any], section: str) -> List[str]:
    known = {f.name for f in fields(target)}
    hints = get_type_hints(type(target))
    problems = []
    for key, value in values.items():
        if key not in known:
            problems.append(f"unknown config key {section}{key}")
            continue
        current = getattr(target, key)
        if isinstance(current, (EmbeddingConfig, CompletionConfig)):
            if not isinstance(value, dict):
                problems.append(f"{section}{key} must be a mapping")
                continue
            problems.extend(_merge(current, value, f"{section}{key}."))
        elif not _accepts(hints[key], value):
            problems.append(f"{section}{key} must be {_type_name(hints[key])}, got {type(value).__name__} {value!r}")
        else:
            setattr(target, key, value)
    return problems


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None) -> SessionConfig:
    """
    Build a SessionConfig from defaults, a YAML file and explicit overrides.

    Args:
        path: Optional YAML key-value file; nested ``embedding`` and ``completion`` sections
        overrides: Values from the command line; ``None`` entries are ignored

    Returns:
        The merged configuration (not yet validated)

    Raises:
        ValidationError: on unreadable YAML, unknown keys or wrongly typed values
    """
    config = SessionConfig()
    problems: List[str] = []

    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ValidationError([f"cannot read config: {e}"], context=str(path))
        if not isinstance(data, dict):
            raise ValidationError(["config file must be a mapping"], context=str(path))
        problems.extend(_merge(config, data, ""))
        logger.debug(f"Loaded configuration from {path}")

    if overrides:
        nested: Dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, leaf = key.partition(".")
            if leaf:
                nested.setdefault(section, {})[leaf] = value
            else:
                nested[key] = value
        problems.extend(_merge(config, nested, ""))

    if problems:
        raise ValidationError(problems, context=str(path or "overrides"))
    return config


def load_synonyms(path: Optional[Union[str, Path]]) -> Dict[str, str]:
    """
    Read a synonym file: a JSON object mapping label variants to canonical labels.

    Keys and values are canonicalized, so ``{"Cars": "car"}`` maps ``cars`` to ``car``.
    """
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError([f"cannot read synonym file: {e}"], context=str(path))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ValidationError(["synonym file must map strings to strings"], context=str(path))
    return {canonical_label(k): canonical_label(v) for k, v in data.items()}
