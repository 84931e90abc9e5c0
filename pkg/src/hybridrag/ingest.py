"""Corpus loading and recursive character chunking.

The splitter works on character spans rather than strings so every chunk
carries exact offsets into its source document. Its merge behaviour follows
the conventional recursive splitter: separators are tried in order, each
separator is kept at the start of the piece that follows it, and pieces are
merged greedily up to ``chunk_size`` with up to ``chunk_overlap`` trailing
characters carried into the next chunk.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

from hybridrag.errors import LoadError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_SEPARATORS: tuple[str, ...] = ("\n\n", "\n", " ", "")

Span = tuple[int, int]


@dataclass(frozen=True)
class DocumentMeta:
    doc_id: str
    company: str
    quarter: str
    fiscal_year: str
    source_path: str = ""

    def __post_init__(self) -> None:
        for name in ("doc_id", "company", "quarter", "fiscal_year"):
            if not str(getattr(self, name)).strip():
                raise ValidationError(f"document metadata field '{name}' must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> DocumentMeta:
        return cls(
            doc_id=data["doc_id"],
            company=data["company"],
            quarter=data["quarter"],
            fiscal_year=data["fiscal_year"],
            source_path=data.get("source_path", ""),
        )


@dataclass(frozen=True)
class DocumentChunk:
    chunk_id: str
    doc_id: str
    text: str
    start_char: int
    end_char: int
    meta: DocumentMeta | None = None

    def to_dict(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "doc_id": self.doc_id,
            "text": self.text,
            "start_char": self.start_char,
            "end_char": self.end_char,
            "meta": self.meta.to_dict() if self.meta else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> DocumentChunk:
        meta = data.get("meta")
        return cls(
            chunk_id=data["chunk_id"],
            doc_id=data["doc_id"],
            text=data["text"],
            start_char=int(data["start_char"]),
            end_char=int(data["end_char"]),
            meta=DocumentMeta.from_dict(meta) if meta else None,
        )


@dataclass(frozen=True)
class ChunkingConfig:
    chunk_size: int
    chunk_overlap: int = 0
    separators: tuple[str, ...] = field(default=DEFAULT_SEPARATORS)
    name: str = "chunk"

    def __post_init__(self) -> None:
        if self.chunk_size <= 0:
            raise ValidationError(f"chunk_size must be positive, got {self.chunk_size}")
        if self.chunk_overlap < 0:
            raise ValidationError(f"chunk_overlap must be non-negative, got {self.chunk_overlap}")
        if self.chunk_overlap >= self.chunk_size:
            raise ValidationError(
                f"chunk_overlap ({self.chunk_overlap}) must be smaller than chunk_size ({self.chunk_size})"
            )
        if not self.separators:
            raise ValidationError("at least one separator is required")
        object.__setattr__(self, "separators", tuple(self.separators))


# Vector index path and knowledge-graph path use different presets.
VECTOR_PRESET = ChunkingConfig(chunk_size=1024, chunk_overlap=0, name="vector")
KG_PRESET = ChunkingConfig(chunk_size=2024, chunk_overlap=204, name="kg")


def load_corpus(root: str | Path, manifest: str | Path) -> list[tuple[str, DocumentMeta]]:
    """Read every document listed in a JSON manifest.

    Each manifest row is ``{file, doc_id, company, quarter, fiscal_year}``;
    ``file`` is resolved against ``root``. Documents come back in manifest
    order.
    """
    root = Path(root)
    manifest = Path(manifest)
    try:
        rows = json.loads(manifest.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(manifest, f"manifest not found: {manifest}") from None
    except json.JSONDecodeError as exc:
        raise LoadError(manifest, f"manifest {manifest} is not valid JSON: {exc}") from None
    if not isinstance(rows, list):
        raise ValidationError(f"manifest {manifest} must be a JSON array")

    seen: set[str] = set()
    duplicates: list[str] = []
    for row in rows:
        doc_id = row.get("doc_id", "") if isinstance(row, dict) else ""
        if doc_id in seen and doc_id not in duplicates:
            duplicates.append(doc_id)
        seen.add(doc_id)
    if duplicates:
        raise ValidationError(f"duplicate doc_id in manifest: {', '.join(duplicates)}")

    documents = []
    for i, row in enumerate(rows):
        missing = [k for k in ("file", "doc_id", "company", "quarter", "fiscal_year") if k not in row]
        if missing:
            raise ValidationError(f"manifest row {i} is missing fields: {', '.join(missing)}")
        path = root / row["file"]
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise LoadError(path, f"document file not found: {path}") from None
        meta = DocumentMeta(
            doc_id=row["doc_id"],
            company=row["company"],
            quarter=row["quarter"],
            fiscal_year=row["fiscal_year"],
            source_path=str(row["file"]),
        )
        documents.append((text, meta))
    logger.debug("loaded %d documents from %s", len(documents), manifest)
    return documents


def _pieces(text: str, start: int, end: int, separator: str) -> list[Span]:
    if separator == "":
        return [(i, i + 1) for i in range(start, end)]
    cuts = []
    pos = text.find(separator, start, end)
    while pos != -1 and pos + len(separator) <= end:
        cuts.append(pos)
        pos = text.find(separator, pos + len(separator), end)
    bounds = [start, *cuts, end]
    return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]


def _merge(pieces: list[Span], size: int, overlap: int) -> list[Span]:
    chunks: list[Span] = []
    current: deque[Span] = deque()
    total = 0
    for piece in pieces:
        length = piece[1] - piece[0]
        if total + length > size and current:
            chunks.append((current[0][0], current[-1][1]))
            while total > overlap or (total + length > size and total > 0):
                first = current.popleft()
                total -= first[1] - first[0]
        current.append(piece)
        total += length
    if current:
        chunks.append((current[0][0], current[-1][1]))
    return chunks


def _split(text: str, start: int, end: int, separators: tuple[str, ...], cfg: ChunkingConfig) -> list[Span]:
    separator = separators[-1]
    remaining: tuple[str, ...] = ()
    for i, sep in enumerate(separators):
        if sep == "":
            separator = ""
            break
        if text.find(sep, start, end) != -1:
            separator = sep
            remaining = separators[i + 1:]
            break

    size = cfg.chunk_size
    spans: list[Span] = []
    good: list[Span] = []
    for piece in _pieces(text, start, end, separator):
        if piece[1] - piece[0] < size:
            good.append(piece)
            continue
        if good:
            spans.extend(_merge(good, size, cfg.chunk_overlap))
            good = []
        if remaining:
            spans.extend(_split(text, piece[0], piece[1], remaining, cfg))
        else:
            # no separator left: hard character cuts keep the size bound
            spans.extend((a, min(a + size, piece[1])) for a in range(piece[0], piece[1], size))
    if good:
        spans.extend(_merge(good, size, cfg.chunk_overlap))
    return spans


def split_spans(text: str, cfg: ChunkingConfig) -> list[Span]:
    """Chunk boundaries as ``(start, end)`` character offsets."""
    if not text:
        return []
    return _split(text, 0, len(text), cfg.separators, cfg)


def split_recursive(text: str, cfg: ChunkingConfig, meta: DocumentMeta | None = None) -> list[DocumentChunk]:
    """Split ``text`` into chunks no longer than ``cfg.chunk_size`` characters.

    Chunk ids are ``<doc_id>:<preset name>:<index>`` with a zero-padded index,
    so lexicographic id order equals document order.
    """
    doc_id = meta.doc_id if meta else "doc"
    return [
        DocumentChunk(
            chunk_id=f"{doc_id}:{cfg.name}:{i:04d}",
            doc_id=doc_id,
            text=text[a:b],
            start_char=a,
            end_char=b,
            meta=meta,
        )
        for i, (a, b) in enumerate(split_spans(text, cfg))
    ]


def chunk_corpus(documents: list[tuple[str, DocumentMeta]], cfg: ChunkingConfig) -> list[DocumentChunk]:
    chunks: list[DocumentChunk] = []
    for text, meta in documents:
        chunks.extend(split_recursive(text, cfg, meta))
    return chunks
