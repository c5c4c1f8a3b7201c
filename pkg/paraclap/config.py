"""Flat ``key = value`` run configuration files.

Keys may be written with dashes or underscores (``batch-size`` or
``batch_size``); ``#`` starts a comment.
"""
from pathlib import Path
from typing import Dict, Mapping

from paraclap.errors import UsageError


def normalize_key(key: str) -> str:
    return key.strip().replace("-", "_")


def read_config(path) -> Dict[str, str]:
    settings = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}, line {line_no}: expected 'key = value'")
        settings[normalize_key(key)] = value.strip()
    return settings


def write_config(settings: Mapping[str, object], path) -> None:
    lines = [f"{key} = {'' if value is None else value}" for key, value in sorted(settings.items())]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
