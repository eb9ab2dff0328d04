"""Human-readable ``key = value`` configuration files.

One assignment per line; ``#`` starts a comment. Values are coerced to the
type of the matching dataclass field (bool accepts true/false/1/0/yes/no,
tuples are comma-separated). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Mapping, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(value: str, typ: Any, key: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.lower() in ("", "none", "null"):
            return None
        return _coerce(value, args[0], key)
    if typ is bool:
        v = value.lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: {value!r} is not a boolean")
    if origin is tuple:
        (inner, *_rest) = typing.get_args(typ)
        parts = [p.strip() for p in value.strip("()[] ").split(",") if p.strip()]
        return tuple(_coerce(p, inner, key) for p in parts)
    try:
        return typ(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot read {value!r} as {getattr(typ, '__name__', typ)}") from e


def build(cls: type[T], values: Mapping[str, str], base: T | None = None) -> T:
    """Dataclass instance from string values; unspecified fields come from
    ``base`` (or the class defaults)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    if base is not None:
        return dataclasses.replace(base, **kwargs)
    return cls(**kwargs)


def load(cls: type[T], path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> T:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        values.update(parse_kv_text(p.read_text(), str(p)))
    values.update(overrides or {})
    return build(cls, values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def dump(obj) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))
