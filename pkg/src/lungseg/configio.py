"""Flat ``key = value`` config files, config hashing, and provenance lines.

Every run stamps its outputs with a provenance line carrying the package
version, a hash of the resolved configuration, and the seed. Text outputs
embed it as a trailing ``#`` comment or as ordinary keys; PNG outputs carry
it in a tEXt chunk.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from . import __version__


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line (expected 'key = value'): {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def read_config(path: Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def write_config(path: Path, values: dict, provenance: str | None = None) -> None:
    text = format_kv(values)
    if provenance:
        text += f"# provenance: {provenance}\n"
    Path(path).write_text(text, encoding="utf-8")


def config_hash(values: dict) -> str:
    canon = "".join(f"{k}={values[k]}\n" for k in sorted(str(k) for k in values))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def provenance_line(values: dict, seed: int) -> str:
    return f"version={__version__} config={config_hash(values)} seed={seed}"
