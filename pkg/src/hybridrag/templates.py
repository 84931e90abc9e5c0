"""Prompt templates shipped as text assets, overridable from a directory."""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from hybridrag.errors import LoadError

CANNOT_ANSWER = "I cannot answer this question based on the available information."


def load_template(name: str, override_dir: str | Path | None = None) -> str:
    """Return template ``name`` (e.g. ``"extract.txt"``), preferring ``override_dir``."""
    if override_dir is not None:
        candidate = Path(override_dir) / name
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    try:
        return resources.files("hybridrag").joinpath("prompts", name).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise LoadError(name, f"unknown prompt template {name}") from None


_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def fill(template: str, **values: str) -> str:
    # single pass, unknown names left alone: chunk text routinely contains braces
    return _PLACEHOLDER.sub(lambda m: values.get(m.group(1), m.group(0)), template)
