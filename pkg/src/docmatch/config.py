"""Flat key-value config files.

Format: one ``key = value`` pair per line, ``#`` starts a comment, blank
lines ignored. Keys are dot-namespaced strings (``synth.n_patients``,
``model.learning_rate``). Values stay strings here; consumers coerce with
the typed getters. Command-line flags override file values.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(text, source=str(path))


class ConfigView:
    """Typed read access over a flat key-value dict with defaults."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(values)

    def has(self, key: str) -> bool:
        return key in self.values

    def get_str(self, key: str, default: str | None = None) -> str:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected integer, got {raw!r}")

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected number, got {raw!r}")

    def get_bool(self, key: str, default: bool | None = None) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: expected boolean, got {raw!r}")

    def get_list(self, key: str, default: tuple[str, ...] | None = None) -> tuple[str, ...]:
        raw = self.values.get(key)
        if raw is None:
            return default
        items = tuple(part.strip() for part in raw.split(",") if part.strip())
        return items
