"""JSONL helpers. Every file starts with a header record carrying ``schema_version``."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator

from .config import SCHEMA_VERSION, ConfigError


def dumps(record: Any) -> str:
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def write_jsonl(path: str | os.PathLike, records: Iterable[Any]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        for rec in records:
            f.write(dumps(rec))
            f.write("\n")
    os.replace(tmp, path)


def iter_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON: {exc.msg}", path, lineno) from exc


def read_jsonl(path: str | os.PathLike) -> tuple[dict, list[dict]]:
    """Return ``(header, records)``; the header must carry a known schema version."""
    recs = list(iter_jsonl(path))
    if not recs:
        raise ConfigError("empty JSONL file", path)
    header = recs[0]
    version = header.get("schema_version")
    if version is None:
        raise ConfigError("first record must be a header with schema_version", path, 1)
    if version > SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is newer than supported {SCHEMA_VERSION}", path, 1)
    return header, recs[1:]
