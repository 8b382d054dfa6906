"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Values are typed by the field
they target (model, training, or loss-weight fields); unknown keys are an
error so typos do not pass silently.
"""
from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .model import ModelConfig
from .objectives import OBJECTIVES, LossWeights
from .trainer import TrainConfig

EXTRA_KEYS = {"vocab_size": int, "min_freq": int, "objectives": str, "model_seed": int}


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls) if f.name != "weights"}


_MODEL = _field_types(ModelConfig)
_TRAIN = {**_field_types(TrainConfig), "max_len": int}
_WEIGHTS = _field_types(LossWeights)


def _coerce(key: str, raw: str, typ):
    try:
        if typ is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        typ = _MODEL.get(key) or _TRAIN.get(key) or _WEIGHTS.get(key) or EXTRA_KEYS.get(key)
        if typ is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, typ)
    return values


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def parse_objectives(spec: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in spec.split(",") if s.strip())
    unknown = [n for n in names if n not in OBJECTIVES]
    if unknown:
        raise ConfigError(f"unknown objective(s): {', '.join(unknown)}; expected from {', '.join(OBJECTIVES)}")
    if not names:
        raise ConfigError("no objectives selected")
    return names


def build_configs(values: dict, base_train: TrainConfig | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Split parsed values into model and training configs."""
    model_kw = {k: v for k, v in values.items() if k in _MODEL}
    weight_kw = {k: v for k, v in values.items() if k in _WEIGHTS}
    train_kw = {k: v for k, v in values.items() if k in _TRAIN}
    try:
        model_cfg = ModelConfig(**model_kw)
        train = replace(base_train or TrainConfig(), **train_kw)
        weights = replace(train.weights, **weight_kw)
        if "objectives" in values:
            weights = weights.only(parse_objectives(values["objectives"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return model_cfg, replace(train, weights=weights)
