"""Knowledge-graph construction and entity-anchored retrieval.

Graph construction is a two-step LLM chain per chunk: the chunk is first
refined into an abstract, then the abstract is turned into triplets of the
form ``[head, head_type, relation, object, object_type, metadata]``. Entities
are disambiguated by normalisation, and retrieval collects every edge within
a bounded number of hops of the entities named in a question.
"""

from __future__ import annotations

import ast
import json
import logging
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from hybridrag.errors import ChunkError, ExtractionError, FormatError, HybridRAGError
from hybridrag.ingest import DocumentChunk, DocumentMeta
from hybridrag.providers import ChatProvider, ChatRequest
from hybridrag.templates import fill, load_template
from hybridrag.vectorstore import MetadataFilter

logger = logging.getLogger(__name__)

GRAPH_FORMAT = "hybridrag-kg"
GRAPH_VERSION = 1

SOFT_WORD_LIMIT = 4
HARD_WORD_LIMIT = 8

ENTITY_TYPES: dict[str, str] = {
    "Company": "companies and corporations: official names, abbreviations, informal references",
    "Financial Metric": "financial metrics and indicators: revenue, profit margins, EBITDA",
    "Executive": "corporate executives and key personnel: CEOs, CFOs, board members",
    "Product": "products and services, tangible or intangible",
    "Location": "geographical locations: headquarters, operating regions, markets",
    "Event": "corporate events: mergers, acquisitions, product launches, earnings calls",
    "Regulation": "legal and regulatory information: legal cases, regulatory compliance",
    "Other": "anything that fits none of the types above",
}

REFINE_SYSTEM = "You condense earnings call transcripts into faithful abstracts for knowledge extraction."
EXTRACT_SYSTEM = "You extract knowledge-graph triplets from earnings call abstracts and answer only with JSON."


@dataclass(frozen=True)
class Triplet:
    head: str
    head_type: str
    relation: str
    object: str
    object_type: str
    metadata: Mapping[str, Any] = field(default_factory=dict, hash=False)
    # the sixth element exactly as the model produced it
    source: Any = field(default="", hash=False)

    def to_nested(self) -> list:
        return [self.head, self.head_type, self.relation, self.object, self.object_type, self.source]


@dataclass
class ExtractionResult:
    triplets: list[Triplet]
    skipped: int = 0
    raw: str = ""

    def __iter__(self):
        return iter(self.triplets)

    def __len__(self) -> int:
        return len(self.triplets)


_DASHES = {"Pd"}


def normalize_entity(surface: str) -> str:
    """Lowercase, drop punctuation (dashes and slashes become spaces), collapse whitespace."""
    out = []
    for ch in unicodedata.normalize("NFKC", surface).lower():
        cat = unicodedata.category(ch)
        if cat in _DASHES or ch == "/":
            out.append(" ")
        elif not cat.startswith("P"):
            out.append(ch)
    return " ".join("".join(out).split())


@dataclass
class EntityKey:
    canonical: str
    surface_counts: Counter = field(default_factory=Counter)
    type_counts: Counter = field(default_factory=Counter)

    @property
    def surface_forms(self) -> set[str]:
        return set(self.surface_counts)

    @property
    def entity_type(self) -> str:
        if not self.type_counts:
            return "Other"
        return min(self.type_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]

    @property
    def display(self) -> str:
        if not self.surface_counts:
            return self.canonical
        return min(self.surface_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


@dataclass(frozen=True)
class Edge:
    head: str
    relation: str
    object: str
    metadata: Mapping[str, Any] = field(default_factory=dict, hash=False)

    @property
    def key(self) -> tuple[str, str, str, str]:
        return (self.head, self.relation, self.object, str(self.metadata.get("chunk_id", "")))


class KnowledgeGraph:
    def __init__(self) -> None:
        self.nodes: dict[str, EntityKey] = {}
        self.edges: list[Edge] = []
        self.adjacency: dict[str, list[int]] = {}
        self._edge_keys: set[tuple[str, str, str, str]] = set()
        self.triplet_count = 0

    def __repr__(self) -> str:
        return f"KnowledgeGraph(nodes={len(self.nodes)}, edges={len(self.edges)})"

    def _node(self, key: str) -> EntityKey:
        node = self.nodes.get(key)
        if node is None:
            node = self.nodes[key] = EntityKey(key)
            self.adjacency[key] = []
        return node

    def add_triplet(self, t: Triplet) -> bool:
        """Add one triplet; returns False when it duplicated an existing edge."""
        self.triplet_count += 1
        head, obj = normalize_entity(t.head), normalize_entity(t.object)
        for key, surface, etype in ((head, t.head, t.head_type), (obj, t.object, t.object_type)):
            node = self._node(key)
            node.surface_counts[surface.strip()] += 1
            node.type_counts[etype or "Other"] += 1
        edge = Edge(head, t.relation.strip(), obj, dict(t.metadata))
        if edge.key in self._edge_keys:
            return False
        self._edge_keys.add(edge.key)
        self._add_edge(edge)
        return True

    def _add_edge(self, edge: Edge) -> None:
        idx = len(self.edges)
        self.edges.append(edge)
        self.adjacency[edge.head].append(idx)
        if edge.object != edge.head:
            self.adjacency[edge.object].append(idx)

    def render(self, edge: Edge) -> str:
        return f"{self.nodes[edge.head].display} —{edge.relation}→ {self.nodes[edge.object].display}"

    def canonical(self) -> tuple:
        """Order-independent form used to compare graphs."""
        nodes = tuple(sorted(
            (n.canonical, tuple(sorted(n.surface_counts.items())), tuple(sorted(n.type_counts.items())))
            for n in self.nodes.values()
        ))
        edges = tuple(sorted(
            (e.head, e.relation, e.object, json.dumps(dict(e.metadata), sort_keys=True)) for e in self.edges
        ))
        return nodes, edges

    def __eq__(self, other: object) -> bool:
        return isinstance(other, KnowledgeGraph) and self.canonical() == other.canonical()

    __hash__ = None  # mutable


def build_graph(triplets: Iterable[Triplet]) -> KnowledgeGraph:
    graph = KnowledgeGraph()
    for t in triplets:
        graph.add_triplet(t)
    return graph


def _chat(chat: ChatProvider, system: str, user: str, temperature: float, max_tokens: int) -> str:
    return chat.chat(ChatRequest(system, user, temperature=temperature, max_output_tokens=max_tokens))


def refine_chunk(
    chunk: DocumentChunk,
    chat: ChatProvider,
    template: str | None = None,
    temperature: float = 0.0,
    max_output_tokens: int = 1024,
) -> str:
    if not chunk.text.strip():
        raise ValueError(f"chunk {chunk.chunk_id} has no text to refine")
    prompt = fill(template or load_template("refine.txt"), chunk_text=chunk.text)
    try:
        return _chat(chat, REFINE_SYSTEM, prompt, temperature, max_output_tokens)
    except HybridRAGError as exc:
        raise ChunkError(chunk.chunk_id, "refine", exc) from exc


def extraction_prompt(refined_text: str, template: str | None = None, relation_verbs: Sequence[str] | None = None) -> str:
    if relation_verbs is None:
        relation_verbs = [v for v in load_template("relation_verbs.txt").splitlines() if v.strip()]
    types = "\n".join(f"- {name}: {desc}" for name, desc in ENTITY_TYPES.items())
    return fill(
        template or load_template("extract.txt"),
        chunk_text=refined_text,
        entity_types=types,
        relation_verbs=", ".join(relation_verbs),
    )


def _decode_list(raw: str) -> Any:
    text = raw.strip()
    fence = re.match(r"^```[\w-]*\s*(.*?)\s*```$", text, re.S)
    if fence:
        text = fence.group(1)
    candidates = [text]
    start, end = text.find("["), text.rfind("]")
    if start != -1 and end > start:
        candidates.append(text[start:end + 1])
    for candidate in candidates:
        try:
            return json.loads(candidate)
        except ValueError:
            pass
        try:
            # single-quoted Python-style lists are common model output
            return ast.literal_eval(candidate)
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            pass
    raise ExtractionError("response is not a list of triplets", raw)


def _word_count(s: str) -> int:
    return len(normalize_entity(s).split())


def parse_triplets(raw: str, meta: DocumentMeta | None = None, chunk_id: str = "") -> ExtractionResult:
    """Parse a model response into triplets; malformed elements are counted, not fatal."""
    value = _decode_list(raw)
    if not isinstance(value, (list, tuple)):
        raise ExtractionError("response is not a list of triplets", raw)
    stamp = {"chunk_id": chunk_id}
    if meta is not None:
        stamp.update(company=meta.company, quarter=meta.quarter, fiscal_year=meta.fiscal_year, doc_id=meta.doc_id)

    triplets, skipped = [], 0
    for item in value:
        if not isinstance(item, (list, tuple)) or len(item) != 6:
            skipped += 1
            continue
        fields = item[:5]
        if not all(isinstance(f, str) for f in fields):
            skipped += 1
            continue
        head, head_type, relation, obj, obj_type = (f.strip() for f in fields)
        if not head or not relation or not obj or not normalize_entity(head) or not normalize_entity(obj):
            skipped += 1
            continue
        words = max(_word_count(head), _word_count(obj))
        if words > HARD_WORD_LIMIT:
            logger.warning("skipping triplet with a %d-word entity in chunk %s: %r", words, chunk_id, item)
            skipped += 1
            continue
        if words > SOFT_WORD_LIMIT:
            logger.warning("long entity name (%d words) in chunk %s: %r", words, chunk_id, item)
        triplets.append(Triplet(head, head_type or "Other", relation, obj, obj_type or "Other", dict(stamp), item[5]))
    return ExtractionResult(triplets, skipped, raw)


def extract_triplets(
    refined_text: str,
    meta: DocumentMeta | None,
    chat: ChatProvider,
    chunk_id: str = "",
    template: str | None = None,
    relation_verbs: Sequence[str] | None = None,
    temperature: float = 0.0,
    max_output_tokens: int = 1024,
) -> ExtractionResult:
    if not refined_text.strip():
        raise ValueError("refined text is empty")
    prompt = extraction_prompt(refined_text, template, relation_verbs)
    try:
        raw = _chat(chat, EXTRACT_SYSTEM, prompt, temperature, max_output_tokens)
    except HybridRAGError as exc:
        raise ChunkError(chunk_id, "extract", exc) from exc
    return parse_triplets(raw, meta, chunk_id)


def retrieve_subgraph(
    entities: Sequence[str],
    graph: KnowledgeGraph,
    depth: int = 1,
    filter: MetadataFilter | None = None,
) -> list[Edge]:
    """Edges within ``depth`` hops of any seed entity, traversed in both directions.

    Only edges whose metadata passes ``filter`` are traversed or returned.
    Output is grouped by seed (in the given order), each group in insertion
    order, with edges already emitted for an earlier seed left out.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    passes = [filter is None or filter.matches(e.metadata) for e in graph.edges]
    emitted: set[int] = set()
    result: list[Edge] = []
    for seed in dict.fromkeys(entities):
        if seed not in graph.nodes:
            continue
        seen = {seed}
        frontier = [seed]
        found: set[int] = set()
        for _ in range(depth):
            nxt = []
            for node in frontier:
                for idx in graph.adjacency[node]:
                    if not passes[idx]:
                        continue
                    found.add(idx)
                    edge = graph.edges[idx]
                    other = edge.object if edge.head == node else edge.head
                    if other not in seen:
                        seen.add(other)
                        nxt.append(other)
            frontier = nxt
        for idx in sorted(found - emitted):
            emitted.add(idx)
            result.append(graph.edges[idx])
    return result


def render_subgraph(edges: Iterable[Edge], graph: KnowledgeGraph) -> list[str]:
    lines = []
    for edge in edges:
        line = graph.render(edge)
        if line not in lines:
            lines.append(line)
    return lines


def _whole_word(form: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(form) + r"(?!\w)")


def link_entities(question: str, graph: KnowledgeGraph) -> list[str]:
    """Canonical keys of nodes mentioned in ``question``, longest match first."""
    if not question.strip():
        raise ValueError("question is empty")
    lowered = question.lower()
    normalized = normalize_entity(question)
    hits: dict[str, int] = {}
    for key, node in graph.nodes.items():
        best = 0
        if key and _whole_word(key).search(normalized):
            best = len(key)
        for form in node.surface_forms:
            form_l = form.lower().strip()
            if form_l and len(form_l) > best and _whole_word(form_l).search(lowered):
                best = len(form_l)
        if best:
            hits[key] = best
    return sorted(hits, key=lambda k: (-hits[k], k))


def save_graph(graph: KnowledgeGraph, path: str | Path) -> None:
    lines = [json.dumps({
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "counts": {"nodes": len(graph.nodes), "edges": len(graph.edges), "triplets": graph.triplet_count},
    }, sort_keys=True)]
    for node in graph.nodes.values():
        lines.append(json.dumps({
            "kind": "node",
            "key": node.canonical,
            "surface_counts": dict(sorted(node.surface_counts.items())),
            "type_counts": dict(sorted(node.type_counts.items())),
        }, sort_keys=True, ensure_ascii=False))
    for edge in graph.edges:
        lines.append(json.dumps({
            "kind": "edge",
            "head": edge.head,
            "relation": edge.relation,
            "object": edge.object,
            "metadata": dict(edge.metadata),
        }, sort_keys=True, ensure_ascii=False))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_graph(path: str | Path) -> KnowledgeGraph:
    data = Path(path).read_bytes()
    lines = data.split(b"\n")
    offsets, pos = [], 0
    for line in lines:
        offsets.append(pos)
        pos += len(line) + 1

    def record(i: int) -> dict:
        try:
            value = json.loads(lines[i].decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise FormatError(f"graph line {i + 1} is not valid JSON: {exc}", offsets[i]) from None
        if not isinstance(value, dict):
            raise FormatError(f"graph line {i + 1} is not a JSON object", offsets[i])
        return value

    if not data.strip():
        raise FormatError("graph file is empty", 0)
    header = record(0)
    if header.get("format") != GRAPH_FORMAT:
        raise FormatError(f"not a graph file (format {header.get('format')!r})", 0)
    if header.get("version") != GRAPH_VERSION:
        raise FormatError(f"graph file version {header.get('version')!r} is not supported (expected {GRAPH_VERSION})", 0)
    counts = header.get("counts") or {}
    n_nodes, n_edges = int(counts.get("nodes", -1)), int(counts.get("edges", -1))
    body = [i for i in range(1, len(lines)) if lines[i].strip()]
    if len(body) != n_nodes + n_edges:
        raise FormatError(
            f"graph truncated or padded: header declares {n_nodes} nodes + {n_edges} edges, found {len(body)} records",
            len(data),
        )

    graph = KnowledgeGraph()
    graph.triplet_count = int(counts.get("triplets", 0))
    for j, i in enumerate(body):
        rec = record(i)
        try:
            if j < n_nodes:
                if rec["kind"] != "node":
                    raise FormatError(f"expected node record on line {i + 1}", offsets[i])
                node = graph._node(rec["key"])
                node.surface_counts.update({k: int(v) for k, v in rec["surface_counts"].items()})
                node.type_counts.update({k: int(v) for k, v in rec["type_counts"].items()})
            else:
                if rec["kind"] != "edge":
                    raise FormatError(f"expected edge record on line {i + 1}", offsets[i])
                edge = Edge(rec["head"], rec["relation"], rec["object"], dict(rec["metadata"]))
                if edge.head not in graph.nodes or edge.object not in graph.nodes:
                    raise FormatError(f"edge on line {i + 1} references an unknown node", offsets[i])
                graph._edge_keys.add(edge.key)
                graph._add_edge(edge)
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise FormatError(f"graph line {i + 1} is malformed: {exc}", offsets[i]) from None
    return graph


def dump_triplets(triplets: Sequence[Triplet], path: str | Path) -> Path:
    """Write the nested-list triplet dump plus a ``.meta.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    path.write_text(json.dumps([t.to_nested() for t in triplets], ensure_ascii=False, indent=1) + "\n", encoding="utf-8")
    sidecar = path.with_suffix(".meta.json")
    sidecar.write_text(json.dumps([dict(t.metadata) for t in triplets], ensure_ascii=False, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return sidecar


def load_triplets(path: str | Path) -> list[Triplet]:
    path = Path(path)
    nested = json.loads(path.read_text(encoding="utf-8"))
    sidecar = path.with_suffix(".meta.json")
    metas = json.loads(sidecar.read_text(encoding="utf-8")) if sidecar.exists() else [{}] * len(nested)
    if len(metas) != len(nested):
        raise FormatError(f"{sidecar} has {len(metas)} entries for {len(nested)} triplets")
    return [Triplet(*row[:5], metadata=m, source=row[5]) for row, m in zip(nested, metas)]
