"""Engine configuration: defaults < config file < command-line overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from hybridrag.errors import LoadError, ValidationError
from hybridrag.evalsuite import EvalConfig
from hybridrag.ingest import ChunkingConfig
from hybridrag.pipelines import RetrievalSettings
from hybridrag.providers import ProviderConfig

DEFAULTS: dict[str, dict[str, Any]] = {
    "corpus": {"root": "corpus", "manifest": "corpus/manifest.json", "ground_truth": "ground_truth.csv"},
    "chunking": {"vector_size": 1024, "vector_overlap": 0, "kg_size": 2024, "kg_overlap": 204},
    "retrieval": {"k_candidates": 20, "k_context": 4, "dfs_depth": 1, "max_context_chars": 0},
    "generation": {"temperature": 0.0, "max_output_tokens": 1024},
    "evaluation": {"n_ar_questions": 3, "workers": 1},
    "kg": {"workers": 4, "prompt_dir": ""},
    "embedding": {
        "kind": "hash", "dim": 64, "seed": "hybridrag",
        "endpoint_url": "", "model_name": "text-embedding-ada-002", "api_key_env_var": "OPENAI_API_KEY",
        "timeout": 60.0, "max_retries": 3, "max_in_flight": 4,
    },
    "chat": {
        "kind": "scripted", "fixtures": "chat_fixtures.json",
        "endpoint_url": "", "model_name": "gpt-3.5-turbo", "api_key_env_var": "OPENAI_API_KEY",
        "timeout": 120.0, "max_retries": 3, "max_in_flight": 4,
    },
    "paths": {"work_dir": "work", "runs_dir": "runs"},
}

PATH_KEYS = {
    ("corpus", "root"), ("corpus", "manifest"), ("corpus", "ground_truth"),
    ("chat", "fixtures"), ("kg", "prompt_dir"), ("paths", "work_dir"), ("paths", "runs_dir"),
}


def _merge(base: dict, update: dict, where: str = "") -> None:
    for section, values in update.items():
        if section not in base:
            raise ValidationError(f"unknown config section [{section}]{where}")
        if not isinstance(values, dict):
            raise ValidationError(f"config section [{section}] must be a table{where}")
        for key, value in values.items():
            if key not in base[section]:
                raise ValidationError(f"unknown config key {section}.{key}{where}")
            base[section][key] = value


def _parse_override(item: str) -> tuple[str, str, Any]:
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ValidationError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    section, key = dotted.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


@dataclass
class EngineConfig:
    data: dict[str, dict[str, Any]]
    base_dir: Path

    def get(self, section: str, key: str) -> Any:
        return self.data[section][key]

    def path(self, section: str, key: str) -> Path | None:
        value = self.data[section][key]
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def work_dir(self) -> Path:
        return self.path("paths", "work_dir")

    @property
    def runs_dir(self) -> Path:
        return self.path("paths", "runs_dir")

    @property
    def index_path(self) -> Path:
        return self.work_dir / "index.hrvx"

    @property
    def chunks_path(self) -> Path:
        return self.work_dir / "chunks.jsonl"

    @property
    def graph_path(self) -> Path:
        return self.work_dir / "graph.jsonl"

    @property
    def triplets_path(self) -> Path:
        return self.work_dir / "triplets.json"

    @property
    def kg_report_path(self) -> Path:
        return self.work_dir / "kg_report.json"

    @property
    def checkpoint_path(self) -> Path:
        return self.work_dir / "kg_checkpoint.json"

    def vector_chunking(self) -> ChunkingConfig:
        c = self.data["chunking"]
        return ChunkingConfig(int(c["vector_size"]), int(c["vector_overlap"]), name="vector")

    def kg_chunking(self) -> ChunkingConfig:
        c = self.data["chunking"]
        return ChunkingConfig(int(c["kg_size"]), int(c["kg_overlap"]), name="kg")

    def retrieval_settings(self) -> RetrievalSettings:
        r, g = self.data["retrieval"], self.data["generation"]
        return RetrievalSettings(
            k_candidates=int(r["k_candidates"]),
            k_context=int(r["k_context"]),
            dfs_depth=int(r["dfs_depth"]),
            temperature=float(g["temperature"]),
            max_output_tokens=int(g["max_output_tokens"]),
            max_context_chars=int(r["max_context_chars"]) or None,
        )

    def eval_config(self) -> EvalConfig:
        e = self.data["evaluation"]
        return EvalConfig(n_questions=int(e["n_ar_questions"]), workers=int(e["workers"]))

    def provider_config(self, section: str) -> ProviderConfig:
        s = self.data[section]
        if not s["endpoint_url"]:
            raise ValidationError(f"{section}.endpoint_url is required for an http provider")
        return ProviderConfig(
            endpoint_url=s["endpoint_url"],
            model_name=s["model_name"],
            api_key_env_var=s["api_key_env_var"],
            timeout=float(s["timeout"]),
            max_retries=int(s["max_retries"]),
            max_in_flight=int(s["max_in_flight"]),
        )

    def validate(self) -> None:
        try:
            self.vector_chunking()
            self.kg_chunking()
            self.retrieval_settings()
            self.eval_config()
            if float(self.get("generation", "temperature")) < 0:
                raise ValueError("generation.temperature must be >= 0")
            if int(self.get("kg", "workers")) < 1:
                raise ValueError("kg.workers must be >= 1")
            if int(self.get("embedding", "dim")) < 1:
                raise ValueError("embedding.dim must be >= 1")
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"invalid configuration: {exc}") from None
        for section, kinds in (("embedding", ("hash", "http")), ("chat", ("scripted", "http", "synthetic"))):
            if self.get(section, "kind") not in kinds:
                raise ValidationError(f"{section}.kind must be one of {', '.join(kinds)}")

    def echo(self) -> dict:
        """Effective configuration with every path made absolute."""
        out = copy.deepcopy(self.data)
        for section, key in PATH_KEYS:
            p = self.path(section, key)
            out[section][key] = str(p) if p else ""
        return out

    def fingerprint(self) -> str:
        """Digest of the non-path settings; paths are covered by hashing the inputs themselves."""
        data = copy.deepcopy(self.data)
        for section, key in PATH_KEYS:
            data[section].pop(key, None)
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> EngineConfig:
    """Load TOML (or a JSON config echo) on top of the defaults, then apply overrides."""
    data = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise LoadError(path, f"config file not found: {path}") from None
        try:
            loaded = json.loads(text) if text.lstrip().startswith("{") else tomllib.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ValidationError(f"cannot parse config {path}: {exc}") from None
        _merge(data, loaded, f" in {path}")
        base_dir = path.resolve().parent
    for item in overrides:
        section, key, value = _parse_override(item)
        _merge(data, {section: {key: value}}, " (command-line override)")
    cfg = EngineConfig(data, base_dir)
    cfg.validate()
    return cfg
