"""Run configuration: one YAML file with ``model``, ``train``, ``reward``,
``data`` and ``paths`` sections plus a top-level ``seed``.

Any field can be overridden on the command line by its dotted name, e.g.
``--train.lr 3e-4`` or ``--model.n_layers=1``. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from .dynreward import RewardParams
from .genmodel import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    count: int = 5000
    size: int = 8
    test_fraction: float = 0.1
    dir: str = "data"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardParams = field(default_factory=RewardParams)
    data: DataConfig = field(default_factory=DataConfig)
    run_dir: str = ""

    def __post_init__(self):
        # the top-level seed is the single source for the training seed
        if self.train.seed != self.seed:
            self.train = dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "reward": RewardParams, "data": DataConfig}


def _coerce(value, typ, key: str):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if typ is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if typ is str:
        return str(value)
    raise ConfigError(f"{key}: unsupported field type {typ!r}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def build(values: dict) -> RunConfig:
    """Build a RunConfig from a flat ``{dotted.key: value}`` mapping over the defaults."""
    top_types = {"seed": int, "run_dir": str}
    sections = {name: {} for name in SECTIONS}
    top = {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head in SECTIONS and rest:
            types = _field_types(SECTIONS[head])
            if rest not in types:
                raise ConfigError(f"unknown config key {key!r}")
            sections[head][rest] = _coerce(value, types[rest], key)
        elif key in top_types:
            top[key] = _coerce(value, top_types[key], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    # the top-level seed wins; train.seed alone is accepted as an alias
    if "train.seed" in values and "seed" not in values:
        top["seed"] = sections["train"]["seed"]
    try:
        parts = {name: cls(**sections[name]) for name, cls in SECTIONS.items()}
        return RunConfig(**top, **parts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values = _flatten(raw)
    values.update(overrides or {})
    return build(values)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def parse_overrides(tokens: list[str]) -> dict:
    """``["--train.lr", "1e-3", "--model.d_model=32"]`` -> ``{"train.lr": "1e-3", ...}``."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0] and tok[2:].split("=", 1)[0] not in ("seed", "run_dir"):
            raise ConfigError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"{tok} needs a value")
            i += 1
            value = tokens[i]
        out[key] = yaml.safe_load(value) if value else value
        i += 1
    return out
