"""Flat ``key = value`` config files (UTF-8, ``#`` comments)."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(settings: dict, header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    for key in sorted(settings):
        value = settings[key]
        if value is None:
            value = ""
        elif isinstance(value, bool):
            value = "true" if value else "false"
        text = str(value)
        if "#" in text or "\n" in text:
            raise ConfigError(f"value for {key!r} cannot contain '#' or newlines")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def write_config(path, settings: dict, header: str | None = None) -> None:
    Path(path).write_text(format_config(settings, header), encoding="utf-8")


def coerce(settings: dict[str, str], schema: dict[str, type], defaults: dict | None = None) -> dict:
    """Typed view of ``settings``; unknown keys are rejected."""
    unknown = set(settings) - set(schema)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults or {})
    for key, raw in settings.items():
        kind = schema[key]
        try:
            if kind is bool:
                low = str(raw).lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                out[key] = low in ("true", "1", "yes")
            else:
                out[key] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return out
