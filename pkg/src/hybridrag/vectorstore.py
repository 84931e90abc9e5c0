"""Exact cosine index over chunk embeddings with metadata filtering.

File layout (little-endian)::

    header   magic b"HRVX" | u16 version | u32 dim | u32 count
    record   u32 record_len | u32 meta_len | meta (UTF-8 JSON) | dim x f64

``record_len`` counts everything after itself, so a reader can skip records
without decoding them.
"""

from __future__ import annotations

import heapq
import json
import math
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from hybridrag.errors import FormatError
from hybridrag.ingest import DocumentChunk, DocumentMeta
from hybridrag.providers import EmbeddingVector

MAGIC = b"HRVX"
VERSION = 1
_HEADER = struct.Struct("<4sHII")
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class MetadataFilter:
    """Exact, case-folded match on company / quarter / fiscal year; ``None`` matches anything."""

    company: str | None = None
    quarter: str | None = None
    fiscal_year: str | None = None

    def _wanted(self):
        for name in ("company", "quarter", "fiscal_year"):
            value = getattr(self, name)
            if value is not None and str(value).strip():
                yield name, str(value).strip().casefold()

    def matches(self, meta: DocumentMeta | Mapping | None) -> bool:
        for name, wanted in self._wanted():
            if meta is None:
                return False
            actual = meta.get(name) if isinstance(meta, Mapping) else getattr(meta, name, None)
            if actual is None or str(actual).strip().casefold() != wanted:
                return False
        return True

    def to_dict(self) -> dict:
        return {"company": self.company, "quarter": self.quarter, "fiscal_year": self.fiscal_year}


@dataclass(frozen=True)
class IndexEntry:
    chunk: DocumentChunk
    vector: EmbeddingVector


@dataclass(frozen=True)
class ScoredChunk:
    chunk: DocumentChunk
    score: float
    rank: int


@dataclass(frozen=True)
class _Stored:
    entry: IndexEntry
    norm: float


class VectorIndex:
    """In-memory exact-scan index.

    Writers swap in a new entry map under a lock; readers take a reference to
    the current map, so a query sees either the whole of an upsert or none of it.
    """

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError("index dim must be positive")
        self.dim = dim
        self._entries: dict[str, _Stored] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[IndexEntry]:
        return [s.entry for s in self._entries.values()]

    def upsert(self, entries: Iterable[IndexEntry]) -> int:
        entries = list(entries)
        prepared = []
        for e in entries:
            if e.vector.dim != self.dim:
                raise ValueError(f"vector for {e.chunk.chunk_id} has dim {e.vector.dim}, index dim is {self.dim}")
            norm = math.sqrt(math.fsum(x * x for x in e.vector.values))
            if norm == 0.0:
                raise ValueError(f"vector for {e.chunk.chunk_id} is all zeros")
            prepared.append(_Stored(e, norm))
        with self._lock:
            updated = dict(self._entries)
            for s in prepared:
                updated[s.entry.chunk.chunk_id] = s
            self._entries = updated
        return len(prepared)

    def query(self, qv: EmbeddingVector, k: int, filter: MetadataFilter | None = None) -> list[ScoredChunk]:
        """Top-``k`` entries by cosine, ties broken by ascending chunk_id."""
        if qv.dim != self.dim:
            raise ValueError(f"query dim {qv.dim} does not match index dim {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = qv.values
        qn = math.sqrt(math.fsum(x * x for x in q))
        if qn == 0.0:
            raise ValueError("query vector is all zeros")
        snapshot = self._entries
        scored = []
        for chunk_id, s in snapshot.items():
            if filter is not None and not filter.matches(s.entry.chunk.meta):
                continue
            dot = math.fsum(x * y for x, y in zip(q, s.entry.vector.values))
            score = max(-1.0, min(1.0, dot / (qn * s.norm)))
            scored.append((-score, chunk_id, s.entry.chunk))
        best = heapq.nsmallest(k, scored, key=lambda t: (t[0], t[1]))
        return [ScoredChunk(chunk, -neg, rank) for rank, (neg, _, chunk) in enumerate(best, start=1)]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        # records in chunk_id order so the bytes do not depend on insertion history
        snapshot = [s for _, s in sorted(self._entries.items())]
        parts = [_HEADER.pack(MAGIC, VERSION, self.dim, len(snapshot))]
        vec = struct.Struct(f"<{self.dim}d")
        for s in snapshot:
            meta = json.dumps(
                {"chunk": s.entry.chunk.to_dict(), "model_id": s.entry.vector.model_id},
                sort_keys=True,
                ensure_ascii=False,
            ).encode("utf-8")
            body = _U32.pack(len(meta)) + meta + vec.pack(*s.entry.vector.values)
            parts.append(_U32.pack(len(body)) + body)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(b"".join(parts))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> VectorIndex:
        data = Path(path).read_bytes()
        version, dim, count = _parse_header(data)
        index = cls(dim)
        entries = []
        offset = _HEADER.size
        for i in range(count):
            if offset + 4 > len(data):
                raise FormatError(f"truncated index: record {i} of {count} missing", offset)
            (record_len,) = _U32.unpack_from(data, offset)
            start = offset + 4
            if start + record_len > len(data):
                raise FormatError(f"truncated index: record {i} needs {record_len} bytes", offset)
            if record_len < 4:
                raise FormatError(f"record {i} is too short", offset)
            (meta_len,) = _U32.unpack_from(data, start)
            vec_bytes = record_len - 4 - meta_len
            if vec_bytes < 0 or vec_bytes % 8:
                raise FormatError(f"record {i} has an invalid layout", offset)
            if vec_bytes // 8 != dim:
                raise FormatError(
                    f"record {i} holds a {vec_bytes // 8}-dim vector but the header declares dim {dim}", offset
                )
            try:
                meta = json.loads(data[start + 4:start + 4 + meta_len].decode("utf-8"))
                chunk = DocumentChunk.from_dict(meta["chunk"])
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"record {i} metadata is corrupt: {exc}", start + 4) from None
            values = struct.unpack_from(f"<{dim}d", data, start + 4 + meta_len)
            entries.append(IndexEntry(chunk, EmbeddingVector(values, meta.get("model_id", ""), dim)))
            offset = start + record_len
        if offset != len(data):
            raise FormatError(f"{len(data) - offset} trailing bytes after {count} records", offset)
        index.upsert(entries)
        return index


def _parse_header(data: bytes) -> tuple[int, int, int]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated index header", len(data))
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"not an index file (magic {magic!r})", 0)
    if version != VERSION:
        raise FormatError(f"unsupported index version {version}, expected {VERSION}", 4)
    if dim == 0:
        raise FormatError("index header declares dim 0", 6)
    return version, dim, count


def read_header(path: str | Path) -> dict:
    """Version, dim and entry count without loading the records."""
    with open(path, "rb") as fh:
        version, dim, count = _parse_header(fh.read(_HEADER.size))
    return {"version": version, "dim": dim, "count": count}
