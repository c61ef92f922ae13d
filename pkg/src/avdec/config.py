"""Flat `key = value` run configuration.

A config file holds one key per line, keys hyphenated exactly like the
command-line flags they mirror (`mask-scale = 25`). Blank lines and `#`
comments are allowed. Command-line flags take precedence over file values,
which take precedence over built-in defaults.
"""

from __future__ import annotations

import dataclasses


def parse_value(raw):
    """Coerce a config string: int, then float, then on/off booleans,
    falling back to the bare string."""
    text = raw.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    lowered = text.lower()
    if lowered in ("true", "on", "yes"):
        return True
    if lowered in ("false", "off", "no"):
        return False
    return text


def load_config(path):
    """Read a flat key = value file into a dict of coerced values."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line.strip()!r}")
            key, raw = text.split("=", 1)
            key = key.strip()
            if not key:
                raise ValueError(f"{path}:{lineno}: empty key")
            if key in values:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = parse_value(raw)
    return values


def resolve(defaults, file_values, flag_values, known_keys=None):
    """Merge defaults <- file <- flags; flags win.

    known_keys guards the file against typos: any file key outside it is an
    error. Flag values of None mean "not given on the command line".
    """
    allowed = set(defaults) if known_keys is None else set(known_keys)
    for key in file_values:
        if key not in allowed:
            raise ValueError(f"unknown config key {key!r} (known: {', '.join(sorted(allowed))})")
    merged = dict(defaults)
    merged.update({k: v for k, v in file_values.items() if k in merged})
    merged.update({k: v for k, v in flag_values.items() if v is not None and k in merged})
    return merged


@dataclasses.dataclass
class RunConfig:
    """The fully resolved settings one command runs with."""

    subcommand: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def describe(self):
        body = " ".join(f"{k}={self.values[k]}" for k in sorted(self.values))
        return f"{self.subcommand}: {body}"
