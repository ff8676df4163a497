"""Experiment configuration: a strict YAML document mapped onto nested dataclasses.

Precedence, lowest to highest: built-in defaults, the config file, command-line flags.
Unknown fields anywhere are rejected.
"""
from __future__ import annotations

import hashlib
import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .models import ExtNetConfig, RecNetConfig, TrainConfig

OUTPUT_ROOT_ENV = "XNN_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # or "folder"
    folder: str | None = None
    num_ids: int = 50
    images_per_id: int = 30
    test_ids: int = 10
    test_images_per_id: int = 20
    image_size: int = 32
    intra_class_noise: float = 0.2
    inter_class_separation: float = 1.0
    prototype_rank: int | None = 32
    world_seed: int = 0
    public_ids: int = 50
    public_images_per_id: int = 30
    distractor_ids: int = 40  # extra one-image identities in the expectation-attack gallery
    attacker_ids: int = 20
    attacker_images_per_id: int = 10

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError(f"data.source must be 'synthetic' or 'folder', got {self.source!r}")
        if self.source == "folder" and not self.folder:
            raise ConfigError("data.folder is required when data.source is 'folder'")


@dataclass(frozen=True)
class ObfSection:
    matrix_kind: str = "orthogonal"

    def __post_init__(self):
        if self.matrix_kind not in ("orthogonal", "gaussian"):
            raise ConfigError(f"obf.matrix_kind must be 'orthogonal' or 'gaussian', got {self.matrix_kind!r}")


@dataclass(frozen=True)
class AttackSection:
    gallery_mode: str = "clean"  # gallery images embedded without obfuscation, or "obfuscated"
    query_budget: int | None = None
    exclude_self: bool = False

    def __post_init__(self):
        if self.gallery_mode not in ("clean", "obfuscated"):
            raise ConfigError(f"attack.gallery_mode must be 'clean' or 'obfuscated', got {self.gallery_mode!r}")


@dataclass(frozen=True)
class XnndSection:
    mix_alpha: float = 1.0
    beta: float = 3.0
    adv_steps_per_rec_step: int = 1
    objective: str = "minimax"
    game_epochs: int = 45
    gen_lr: float = 0.2
    adv_reset_every: int = 2
    temperature: float = 4.0
    ce_weight: float = 0.5
    distill_epochs: int = 25
    student_init: str = "fresh"  # or "adversary"

    def __post_init__(self):
        if self.student_init not in ("adversary", "fresh"):
            raise ConfigError(f"xnnd.student_init must be 'adversary' or 'fresh', got {self.student_init!r}")


@dataclass(frozen=True)
class BaselinesSection:
    instahide_k: tuple = (2, 3)
    dominance_threshold: float = 0.65
    encode_test: bool = True
    sign_readout: str = "abs"


@dataclass(frozen=True)
class OutputSection:
    root: str | None = None  # falls back to $XNN_OUTPUT_ROOT, then ./runs
    plots: bool = True

    def resolved_root(self) -> Path:
        return Path(self.root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    extnet: ExtNetConfig = field(default_factory=ExtNetConfig)
    recnet: RecNetConfig = field(default_factory=RecNetConfig)
    obf: ObfSection = field(default_factory=ObfSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=64, epochs=15))
    attack: AttackSection = field(default_factory=AttackSection)
    xnnd: XnndSection = field(default_factory=XnndSection)
    baselines: BaselinesSection = field(default_factory=BaselinesSection)
    output: OutputSection = field(default_factory=OutputSection)
    seeds: tuple = (0, 1, 2, 3, 4)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def config_hash(self) -> str:
        """Short content hash of the materialized config."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def override(self, dotted: dict) -> "ExperimentConfig":
        """Apply ``{"train.epochs": 3, ...}`` style overrides (flags beat the file)."""
        d = self.to_dict()
        for path, value in dotted.items():
            if value is None:
                continue
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config section {path!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config field {path!r}")
            node[leaf] = value
        return from_dict(d)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if tp is typing.Any:
        return value
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
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


def _build(cls, data, where="", base=None):
    """Fill ``base`` (default-constructed ``cls`` if None) from a mapping, recursively."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown field(s) in {where or 'config'}: {', '.join(unknown)}")
    base = cls() if base is None else base
    kw = {}
    for k, v in data.items():
        sub = f"{where}.{k}".lstrip(".")
        if is_dataclass(hints[k]):
            kw[k] = _build(hints[k], v, sub, getattr(base, k))
        else:
            kw[k] = _coerce(v, hints[k], sub)
    try:
        return replace(base, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data)


def load_config(path=None) -> ExperimentConfig:
    """Parse a YAML config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = ["ExperimentConfig", "DataSection", "ObfSection", "AttackSection", "XnndSection",
           "BaselinesSection", "OutputSection", "load_config", "from_dict", "dump_config", "OUTPUT_ROOT_ENV"]
