"""Config-file loading shared by the grammar, plan and noise readers."""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1
CONFIG_DIR_ENV = "KNEECUT_CONFIG_DIR"


class ConfigError(ValueError):
    """A config file is missing, unparsable, or violates a constraint.

    ``path`` and ``line`` are filled in when known so the CLI can point at
    the offending location.
    """

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if self.path is not None:
            where = self.path if line is None else f"{self.path}:{line}"
            where += ": "
        super().__init__(where + message)


def load_yaml(path: str | os.PathLike) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = None if mark is None else mark.line + 1
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", path, line) from exc
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path, 1)
    return data


def default_config_path(name: str) -> Path:
    """Resolve a shipped config file, honouring ``$KNEECUT_CONFIG_DIR``."""
    override = os.environ.get(CONFIG_DIR_ENV)
    if override:
        candidate = Path(override) / name
        if candidate.exists():
            return candidate
    return Path(str(resources.files("kneecut") / "data" / name))
