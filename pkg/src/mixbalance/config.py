"""``key = value`` configuration files."""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
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
        out[key.replace("-", "_")] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def parse_int_list(text: str) -> list[int]:
    text = text.strip().strip("[]")
    return [int(v) for v in text.split(",") if v.strip()]


def parse_float_list(text: str) -> list[float]:
    text = text.strip().strip("[]")
    return [float(v) for v in text.split(",") if v.strip()]


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")
