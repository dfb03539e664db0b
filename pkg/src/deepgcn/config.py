"""Key-value text round-tripping for the dataclass configs.

Run configs are INI files with ``[model]``, ``[train]`` and ``[data]``
sections; every field is written out explicitly so a resolved config file
carries no hidden defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing

from .errors import ConfigError


def _coerce(value: str, typ, name):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value.strip()
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(_coerce(p, inner, name) for p in parts)
        if origin in (typing.Union, types.UnionType):
            args = [a for a in typing.get_args(typ) if a is not type(None)]
            if value.strip().lower() in ("none", ""):
                return None
            return _coerce(value, args[0], name)
    except ValueError:
        raise ConfigError(f"{name}: cannot interpret {value!r} as {typ}") from None
    raise ConfigError(f"{name}: unsupported field type {typ}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def from_mapping(cls, mapping: dict, section=None):
    """Build ``cls`` from string values; unknown keys are a config error."""
    types = field_types(cls)
    kwargs = {}
    for key, raw in mapping.items():
        if key not in types:
            where = f"[{section}] " if section else ""
            raise ConfigError(f"{where}unknown key {key!r}")
        kwargs[key] = _coerce(raw, types[key], key) if isinstance(raw, str) else raw
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def to_mapping(obj) -> dict:
    return {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def to_text(sections: dict) -> str:
    """Canonical INI text: sections in the given order, keys sorted."""
    out = io.StringIO()
    for i, (name, obj) in enumerate(sections.items()):
        if i:
            out.write("\n")
        out.write(f"[{name}]\n")
        mapping = obj if isinstance(obj, dict) else to_mapping(obj)
        for key in sorted(mapping):
            out.write(f"{key} = {mapping[key]}\n")
    return out.getvalue()


def parse_text(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return {s: dict(parser[s]) for s in parser.sections()}
