"""Run configuration and strict TOML/dict loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetManifest, DomainSpec, default_domain_specs
from .model import LossWeights

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodebookConfig:
    size: int = 64
    dim: int = 16
    gamma: float = 0.99
    mode: str = "ema"
    commitment: bool = True
    reseed_below: float | None = None


@dataclass(frozen=True)
class RunConfig:
    manifest: DatasetManifest = field(default_factory=DatasetManifest)
    domains: tuple[DomainSpec, ...] = ()
    target_domain: int = 0
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_at: float = 0.8
    lr_decay_factor: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    hidden: tuple[int, ...] = (32,)
    teacher_decay: float = 0.999
    val_fraction: float = 0.2
    val_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.domains:
            object.__setattr__(self, "domains", tuple(default_domain_specs(self.manifest.n_domains)))

    def validate(self) -> None:
        self.manifest.validate()
        if len(self.domains) != self.manifest.n_domains:
            raise ConfigError("number of domain specs does not match manifest.n_domains")
        for s in self.domains:
            s.validate()
        if not 0 <= self.target_domain < self.manifest.n_domains:
            raise ConfigError(f"target_domain {self.target_domain} out of range")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1 or self.val_every < 1:
            raise ConfigError("batch_size and val_every must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay_at <= 1:
            raise ConfigError("lr_decay_at must lie in (0, 1]")
        if not 0 <= self.teacher_decay < 1:
            raise ConfigError("teacher_decay must lie in [0, 1)")
        if self.codebook.mode not in ("ema", "sgd", "fixed", "none"):
            raise ConfigError(f"unknown codebook mode {self.codebook.mode!r}")
        if not 0 <= self.codebook.gamma <= 1:
            raise ConfigError("codebook.gamma must lie in [0, 1]")
        self.weights.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _build(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
        kwargs = {k: _build(hints[k], v, f"{path}.{k}" if path else k) for k, v in value.items()}
        try:
            return tp(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        inner = args[0]
        return tuple(_build(inner, v, f"{path}[{i}]") for i, v in enumerate(value))
    if origin in (typing.Union, types.UnionType):
        if value is None:
            return None
        non_none = [a for a in args if a is not type(None)]
        return _build(non_none[0], value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def run_config_from_dict(d: dict) -> RunConfig:
    cfg = _build(RunConfig, d, "")
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class OutputPaths:
    out_dir: Path
    dataset: Path | None = None
    checkpoint: Path | None = None


@dataclass(frozen=True)
class ConfigFile:
    """A parsed config file: the run template plus resolved paths and extras."""

    run: RunConfig
    paths: OutputPaths
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    source: Path | None = None


_TOP_KEYS = {"run", "paths", "ablate"}


def load_config(path) -> ConfigFile:
    """Read a TOML config: ``[run]`` (RunConfig), ``[paths]``, ``[ablate]``.

    Unknown keys anywhere are rejected; paths resolve relative to the file.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw, path.parent.resolve(), source=path.resolve())


def config_from_dict(raw: dict, base: Path, source: Path | None = None) -> ConfigFile:
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    run = run_config_from_dict(raw.get("run", {}))
    paths_raw = dict(raw.get("paths", {}))
    extra = sorted(set(paths_raw) - {"out_dir", "dataset", "checkpoint"})
    if extra:
        raise ConfigError(f"paths: unknown key {extra[0]!r}")

    def resolve(key, default=None):
        v = paths_raw.get(key, default)
        if v is None:
            return None
        if not isinstance(v, str):
            raise ConfigError(f"paths.{key}: expected a string")
        p = Path(v)
        return p if p.is_absolute() else (base / p).resolve()

    paths = OutputPaths(resolve("out_dir", "out"), resolve("dataset"), resolve("checkpoint"))
    ablate_raw = dict(raw.get("ablate", {}))
    extra = sorted(set(ablate_raw) - {"seeds"})
    if extra:
        raise ConfigError(f"ablate: unknown key {extra[0]!r}")
    seeds = _build(tuple[int, ...], ablate_raw.get("seeds", [0, 1, 2]), "ablate.seeds")
    if len(seeds) < 1:
        raise ConfigError("ablate.seeds must not be empty")
    return ConfigFile(run, paths, seeds, source)
