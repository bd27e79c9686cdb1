"""Validation helpers shared by the config dataclasses."""

import dataclasses
import math

from src.errors import ConfigError


def require_choice(name, value, choices):
    """Validates that ``value`` is one of ``choices``."""
    if value not in choices:
        raise ConfigError(f"{name} must be one of {', '.join(map(str, choices))}; got {value!r}")


def require_number(name, value, low=None, high=None, low_open=False, high_open=False):
    """Validates a finite real inside optional (open or closed) bounds."""
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{name} must be a finite number; got {value!r}")
    if low is not None and (value < low or (low_open and value == low)):
        bracket = "(" if low_open else "["
        raise ConfigError(f"{name} must lie in {bracket}{low}, {high}]; got {value}")
    if high is not None and (value > high or (high_open and value == high)):
        bracket = ")" if high_open else "]"
        raise ConfigError(f"{name} must lie in [{low}, {high}{bracket}; got {value}")


def require_int(name, value, low=None):
    """Validates an integer with an optional lower bound."""
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer; got {value!r}")
    if low is not None and value < low:
        raise ConfigError(f"{name} must be >= {low}; got {value}")


def from_dict(cls, data, aliases=None):
    """Builds dataclass ``cls`` from a dict, rejecting unknown keys, then validates it."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} expects an object, got {type(data).__name__}")
    aliases = aliases or {}
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key = aliases.get(key, key)
        if key not in known:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}")
        kwargs[key] = value
    obj = cls(**kwargs)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        validate()
    return obj


def to_dict(obj):
    """Plain-dict view of a config dataclass (tuples become lists for JSON)."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out
