"""
Config layering: command-line flags override a JSON config file, which overrides the
dataclass defaults.
"""
import dataclasses
import hashlib
import json
import os
import typing

from .errors import ConfigError, MissingFileError
from .util import _getLogger


log = _getLogger("config")


def _accepts(hint, value):
    if hint is typing.Any:
        return True
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        return any(_accepts(arg, value) for arg in args)
    if hint is type(None):
        return value is None
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            return False
        if origin is list and args:
            return all(_accepts(args[0], v) for v in value)
        return True
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint is bool:
        return isinstance(value, bool)
    if isinstance(hint, type):
        return isinstance(value, hint)
    return True


def _coerce(hint, value):
    origin = typing.get_origin(hint)
    if hint is float and isinstance(value, int):
        return float(value)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    if origin is typing.Union:
        for arg in typing.get_args(hint):
            if arg is not type(None) and _accepts(arg, value):
                return _coerce(arg, value)
    return value


def read_config_file(path):
    if not os.path.exists(path):
        raise MissingFileError(path)
    with open(path) as f:
        try:
            document = json.load(f)
        except ValueError as exc:
            raise ConfigError({"<file>": "%s is not valid JSON (%s)" % (path, exc)})
    if not isinstance(document, dict):
        raise ConfigError({"<file>": "%s must hold a JSON object" % path})
    return document


def load_config(cls, path=None, overrides=None, base=None):
    """
    Build a `cls` dataclass from its defaults, then `base` (a preset), then the JSON
    object at `path`, then the non-None entries of `overrides`. Unknown keys and
    ill-typed values raise ConfigError, as does anything the class's `validate()` rejects.
    """
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    values = dict(base or {})
    if path is not None:
        values.update(read_config_file(path))
        log.debug("Read %d settings from %s", len(values), path)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    reasons = {}
    for key in sorted(values):
        if key not in names:
            reasons[key] = "unknown setting for %s" % cls.__name__
        elif not _accepts(hints[key], values[key]):
            reasons[key] = "expected %s, got %r" % (getattr(hints[key], "__name__", hints[key]),
                                                   values[key])
    if reasons:
        raise ConfigError(reasons)
    config = cls(**{key: _coerce(hints[key], value) for key, value in values.items()})
    if hasattr(config, "validate"):
        config.validate()
    return config


def canonical_json(obj):
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj):
    """
    SHA-256 of the canonical JSON of a config (a dataclass or a plain dict).
    """
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
