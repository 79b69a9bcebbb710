"""key=value configuration files and the bundled presets."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

PRESETS = ("tiny", "full")


def parse_kv(text: str) -> dict:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def load_preset(name_or_path: str) -> dict:
    """A bundled preset by name, or any key=value file by path."""
    if name_or_path in PRESETS:
        text = (resources.files("tsrcan") / "presets" / f"{name_or_path}.cfg").read_text()
    else:
        text = Path(name_or_path).read_text()
    return parse_kv(text)
