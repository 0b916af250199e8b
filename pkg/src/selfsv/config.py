"""Flat key=value run-configuration files (UTF-8 text).

One setting per line, ``key=value``; blank lines and ``#`` comments are
skipped.  Values stay strings; the CLI feeds them through the same type
converters as its command-line flags, and explicit flags win over the
file.
"""

from pathlib import Path


def load_config(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def save_config(path, values: dict) -> None:
    lines = [f"{k}={values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
