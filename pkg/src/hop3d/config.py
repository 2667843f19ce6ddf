"""Flat run configuration shared by every CLI command.

All settings live in one flat namespace of unique keys, e.g. ``lr_phase2``,
``n_test``, ``tau`` or ``hop_ent``. A YAML file supplies a mapping of those
keys; ``--set key=value`` overrides one key, the value being parsed as a
YAML scalar. Precedence is defaults < file < command line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SplitSpec
from .hop_ent import EntropyConfig
from .trainer import Flags, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    flags: Flags = field(default_factory=Flags)
    out: str = "runs/default"
    support_seed: int = 100
    eval_workers: int = 1
    ablation_seeds: int = 5

    # flat view ------------------------------------------------------------

    def to_flat(self) -> dict:
        flat = {}
        for section in (self.train, self.train.entropy, self.split, self.flags):
            for f in dataclasses.fields(section):
                if f.name == "entropy":
                    continue
                v = getattr(section, f.name)
                flat[f.name] = list(v) if isinstance(v, tuple) else v
        for f in dataclasses.fields(self):
            if f.name not in ("train", "split", "flags"):
                flat[f.name] = getattr(self, f.name)
        return flat

    @classmethod
    def from_flat(cls, values: dict) -> "RunConfig":
        base = cls().to_flat()
        unknown = sorted(set(values) - set(base))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = dict(base)
        for k, v in values.items():
            merged[k] = _coerce(k, v, base[k])
        pick = lambda dc: {f.name: merged[f.name] for f in dataclasses.fields(dc) if f.name in merged}
        try:
            entropy = EntropyConfig(**pick(EntropyConfig))
            train = TrainConfig(entropy=entropy, **{k: v for k, v in pick(TrainConfig).items()})
            split_kw = pick(SplitSpec)
            split_kw["classes_per_scene"] = tuple(split_kw["classes_per_scene"])
            split = SplitSpec(**split_kw)
            flags = Flags(**pick(Flags))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        top = {f.name: merged[f.name] for f in dataclasses.fields(cls) if f.name not in ("train", "split", "flags")}
        return cls(train=train, split=split, flags=flags, **top)

    def with_overrides(self, **values) -> "RunConfig":
        flat = self.to_flat()
        flat.update(values)
        return RunConfig.from_flat(flat)


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):  # yaml reads "1e-2" as a string
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected a list of {len(default)} values, got {value!r}")
        return [_coerce(key, v, d) for v, d in zip(value, default)]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def parse_set(items) -> dict:
    """``["a=1", "b=true"]`` -> ``{"a": 1, "b": True}``."""
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {key}: cannot parse {raw!r}") from exc
    return out


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    data = yaml.safe_load(p.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: expected a mapping of key: value")
    return data


def load_run_config(path=None, sets=None, seed: int | None = None, out: str | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(read_config_file(path))
    values.update(parse_set(sets))
    if seed is not None:
        values["seed"] = seed
    if out is not None:
        values["out"] = out
    return RunConfig.from_flat(values)


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_flat(), sort_keys=True)
