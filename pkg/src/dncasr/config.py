"""Flat ``key=value`` config files for the dataclass configs."""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def _format(value) -> str:
    if value is None:
        return "off"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse(text: str, field: dataclasses.Field, default):
    text = text.strip()
    ann = str(field.type)
    if text == "off" and "None" in ann:
        return None
    if "tuple" in ann:
        elem = 0.0 if "float" in ann else 0
        parts = [p for p in text.replace(":", ",").split(",") if p.strip()]
        return tuple(_parse_scalar(p.strip(), elem) for p in parts)
    like = default
    if like is None:
        like = 0.0 if "float" in ann else ("" if "str" in ann else 0)
    return _parse_scalar(text, like)


def parse_kv(text: str, *classes):
    """Parse ``key=value`` lines into one instance per dataclass in ``classes``.

    Keys must belong to exactly one of the classes; unknown keys raise.
    """
    owners = {}
    for cls in classes:
        for f in dataclasses.fields(cls):
            owners[f.name] = (cls, f)
    values = {cls: {} for cls in classes}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in owners:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cls, f = owners[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        try:
            values[cls][key] = _parse(val, f, default)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
    out = []
    for cls in classes:
        try:
            out.append(cls(**values[cls]))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
    return out[0] if len(out) == 1 else tuple(out)


def dump_kv(*objs) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name}={_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def load_kv(path: str | Path, *classes):
    return parse_kv(Path(path).read_text(encoding="utf-8"), *classes)


def save_kv(path: str | Path, *objs) -> None:
    Path(path).write_text(dump_kv(*objs), encoding="utf-8")
