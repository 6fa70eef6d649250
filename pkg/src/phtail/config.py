"""Flat ``key = value`` run configuration files.

Blank lines and lines starting with ``#`` are ignored.  Keys use the long
option names of the command they configure, with dashes or underscores::

    # weibull_ph.cfg
    data = weibull.csv
    decoder = ph
    phases = 10
    seed = 3
"""

from __future__ import annotations

from pathlib import Path

__all__ = ["ConfigError", "parse_config", "read_config"]


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))
