"""Experiment configuration: defaults, YAML loading and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .aggregation import DEFENSE_DEFAULTS, DefenseSpec
from .attacks import ATTACK_DEFAULTS, AttackSpec
from .model import MlpArch

ATTACKER_VIEWS = ("current_round", "own_honest")


@dataclass(frozen=True)
class LocalTraining:
    steps: int = 10
    lr: float = 0.1
    batch_size: int = 32


@dataclass(frozen=True)
class ModelShape:
    hidden_dims: tuple[int, ...] = (32,)
    embedding_dim: int = 16


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    feature_dim: int = 20
    n_per_class: int = 500
    radius: float = 5.0
    noise_sigma: float = 1.0
    train_csv: str | None = None
    test_csv: str | None = None


@dataclass(frozen=True)
class PartitionSettings:
    beta: float = 1.0
    min_samples_per_client: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = 150
    num_clients: int = 50
    malicious_fraction: float = 0.2
    sample_fraction: float = 0.2
    local: LocalTraining = field(default_factory=LocalTraining)
    model: ModelShape = field(default_factory=ModelShape)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionSettings = field(default_factory=PartitionSettings)
    attack: AttackSpec = field(default_factory=AttackSpec)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    aux_coverage: float = 1.0
    root_size: int = 100
    attacker_view: str = "current_round"
    workers: int = 1

    @property
    def arch(self) -> MlpArch:
        return MlpArch(self.data.feature_dim, self.model.hidden_dims, self.model.embedding_dim, self.data.num_classes)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted-path overrides, e.g. ``{"partition.beta": 0.2}``."""
        tree = to_dict(self)
        for key, value in changes.items():
            node = tree
            parts = key.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return from_dict(tree)


class ConfigError(ValueError):
    """Raised with the full list of violations found in a configuration."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


_SECTIONS = {
    "local": LocalTraining,
    "model": ModelShape,
    "data": DataConfig,
    "partition": PartitionSettings,
}
_TOP_LEVEL = {
    "seed", "rounds", "num_clients", "malicious_fraction", "sample_fraction",
    "aux_coverage", "root_size", "attacker_view", "workers", "attack", "defense", *_SECTIONS,
}


def to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    tree = asdict(cfg)
    tree["model"]["hidden_dims"] = list(cfg.model.hidden_dims)
    tree["attack"] = {"kind": cfg.attack.kind, **copy.deepcopy(cfg.attack.params)}
    tree["defense"] = {"kind": cfg.defense.kind, **copy.deepcopy(cfg.defense.params)}
    return tree


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _build_section(name: str, cls, raw, violations: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        violations.append(f"{name}: expected a mapping")
        return cls()
    known = set(cls.__dataclass_fields__)
    for key in sorted(set(raw) - known):
        violations.append(f"{name}.{key}: unknown field")
    kwargs = {k: v for k, v in raw.items() if k in known}
    if "hidden_dims" in kwargs:
        hd = kwargs["hidden_dims"]
        if not isinstance(hd, (list, tuple)) or not all(_is_int(h) for h in hd):
            violations.append(f"{name}.hidden_dims: expected a list of integers")
            kwargs.pop("hidden_dims")
        else:
            kwargs["hidden_dims"] = tuple(hd)
    return cls(**kwargs)


def _build_spec(name: str, raw, defaults: dict, spec_cls, violations: list[str]):
    if raw is None:
        return spec_cls()
    if isinstance(raw, str):
        raw = {"kind": raw}
    if not isinstance(raw, dict):
        violations.append(f"{name}: expected a mapping with a 'kind' field")
        return spec_cls()
    raw = dict(raw)
    kind = raw.pop("kind", spec_cls().kind)
    if kind not in defaults:
        violations.append(f"{name}.kind: unknown {name} kind {kind!r} (choose from {', '.join(defaults)})")
        return spec_cls()
    try:
        return spec_cls(kind, raw)
    except ValueError as exc:
        violations.append(f"{name}: {exc}")
        return spec_cls()


def validate(cfg: ExperimentConfig) -> list[str]:
    """Return every invariant violation in ``cfg`` (empty list when valid)."""
    v = []
    if not _is_int(cfg.seed) or cfg.seed < 0:
        v.append("seed: must be a non-negative integer")
    if not _is_int(cfg.rounds) or cfg.rounds < 1:
        v.append("rounds: must be an integer >= 1")
    if not _is_int(cfg.num_clients) or cfg.num_clients < 1:
        v.append("num_clients: must be an integer >= 1")
    if not _is_number(cfg.malicious_fraction) or not 0 <= cfg.malicious_fraction < 0.5:
        v.append("malicious_fraction: must satisfy 0 <= malicious_fraction < 0.5")
    if not _is_number(cfg.sample_fraction) or not 0 < cfg.sample_fraction <= 1:
        v.append("sample_fraction: must satisfy 0 < sample_fraction <= 1")
    if not _is_number(cfg.aux_coverage) or not 0 < cfg.aux_coverage <= 1:
        v.append("aux_coverage: must satisfy 0 < aux_coverage <= 1")
    if not _is_int(cfg.root_size) or cfg.root_size < 1:
        v.append("root_size: must be an integer >= 1")
    if cfg.attacker_view not in ATTACKER_VIEWS:
        v.append(f"attacker_view: must be one of {', '.join(ATTACKER_VIEWS)}")
    if not _is_int(cfg.workers) or cfg.workers < 1:
        v.append("workers: must be an integer >= 1")
    lt = cfg.local
    if not _is_int(lt.steps) or lt.steps < 0:
        v.append("local.steps: must be an integer >= 0")
    if not _is_number(lt.lr) or lt.lr <= 0:
        v.append("local.lr: must be > 0")
    if not _is_int(lt.batch_size) or lt.batch_size < 1:
        v.append("local.batch_size: must be an integer >= 1")
    if any(h < 1 for h in cfg.model.hidden_dims):
        v.append("model.hidden_dims: every width must be >= 1")
    if not _is_int(cfg.model.embedding_dim) or cfg.model.embedding_dim < 1:
        v.append("model.embedding_dim: must be an integer >= 1")
    d = cfg.data
    for key in ("num_classes", "feature_dim", "n_per_class"):
        val = getattr(d, key)
        if not _is_int(val) or val < 1:
            v.append(f"data.{key}: must be an integer >= 1")
    if not _is_number(d.radius) or d.radius <= 0:
        v.append("data.radius: must be > 0")
    if not _is_number(d.noise_sigma) or d.noise_sigma < 0:
        v.append("data.noise_sigma: must be >= 0")
    if (d.train_csv is None) != (d.test_csv is None):
        v.append("data: train_csv and test_csv must be given together")
    pt = cfg.partition
    if not _is_number(pt.beta) or pt.beta <= 0:
        v.append("partition.beta: must be > 0")
    if not _is_int(pt.min_samples_per_client) or pt.min_samples_per_client < 0:
        v.append("partition.min_samples_per_client: must be an integer >= 0")
    if cfg.attack.kind in ("minmax", "minsum") and cfg.attack.params["perturbation"] not in ("inverse_unit", "printed"):
        v.append("attack.perturbation: must be 'inverse_unit' or 'printed'")
    if cfg.attack.kind == "lie" and cfg.attack.params["population"] not in ("global", "round"):
        v.append("attack.population: must be 'global' or 'round'")
    if cfg.attack.kind == "fang" and not cfg.attack.params["b"] > 1:
        v.append("attack.b: must be > 1")
    return v


def from_dict(raw: dict | None) -> ExperimentConfig:
    """Build a config from a parsed tree; raises :class:`ConfigError` listing all problems."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a mapping"])
    violations: list[str] = []
    for key in sorted(set(raw) - _TOP_LEVEL):
        violations.append(f"{key}: unknown field")
    kwargs: dict[str, Any] = {}
    for key in _TOP_LEVEL - set(_SECTIONS) - {"attack", "defense"}:
        if key in raw:
            kwargs[key] = raw[key]
    for name, cls in _SECTIONS.items():
        try:
            kwargs[name] = _build_section(name, cls, raw.get(name), violations)
        except TypeError as exc:
            violations.append(f"{name}: {exc}")
    kwargs["attack"] = _build_spec("attack", raw.get("attack"), ATTACK_DEFAULTS, AttackSpec, violations)
    kwargs["defense"] = _build_spec("defense", raw.get("defense"), DEFENSE_DEFAULTS, DefenseSpec, violations)
    cfg = ExperimentConfig(**kwargs)
    violations.extend(validate(cfg))
    if violations:
        raise ConfigError(violations)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Parse a YAML file (an empty file yields the reference experiment)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: not valid YAML ({exc})"]) from None
    return from_dict(tree)
