"""Plain-text key-value config files.

Files use INI sections (``[encoder]``, ``[lm]``, ``[train]``, ``[vit_arch]``,
``[lm_arch]`` ...) holding ``key = value`` lines; ``#`` starts a comment.
Values are coerced to the field types of the dataclass they populate.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Mapping, TypeVar

from .errors import ConfigError

T = TypeVar("T")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_config(path: str | Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def _coerce(raw: Any, typ, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if typing.get_origin(typ) in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def dataclass_from_mapping(cls: type[T], mapping: Mapping[str, Any]) -> T:
    """Build ``cls`` from ``mapping``; unknown keys are an error."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in mapping.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def load_section(path: str | Path, section: str, cls: type[T], required: bool = False) -> T:
    sections = read_config(path)
    if section not in sections:
        if required:
            raise ConfigError(f"{path}: missing [{section}] section")
        return cls()
    return dataclass_from_mapping(cls, sections[section])
