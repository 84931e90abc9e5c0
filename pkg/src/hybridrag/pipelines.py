"""VectorRAG, GraphRAG and HybridRAG question answering.

All three pipelines share one answer prompt; they differ only in how the
context is assembled. The hybrid context is the vector context followed by
the graph context, re-ranked from 1.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from hybridrag.errors import HybridRAGError, StageError
from hybridrag.kg import KnowledgeGraph, link_entities, render_subgraph, retrieve_subgraph
from hybridrag.providers import ChatProvider, ChatRequest, Embedder
from hybridrag.templates import fill, load_template
from hybridrag.vectorstore import MetadataFilter, VectorIndex

PIPELINES = ("vector", "graph", "hybrid")
PIPELINE_LABELS = {"vector": "VectorRAG", "graph": "GraphRAG", "hybrid": "HybridRAG"}

ANSWER_SYSTEM = "You are an expert question-answering system for company earnings call transcripts."
CONTEXT_DELIMITER = "\n\n"


@dataclass(frozen=True)
class ContextItem:
    text: str
    source: str
    score: float | None
    rank: int

    def to_dict(self) -> dict:
        return {"text": self.text, "source": self.source, "score": self.score, "rank": self.rank}


@dataclass(frozen=True)
class RetrievedContext:
    items: tuple[ContextItem, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        for expected, item in enumerate(self.items, start=1):
            if item.rank != expected:
                raise ValueError(f"context ranks must run 1..n, found {item.rank} at position {expected}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def rendered(self) -> str:
        return CONTEXT_DELIMITER.join(f"[{i.source}:{i.rank}] {i.text}" for i in self.items)

    @property
    def texts(self) -> list[str]:
        return [i.text for i in self.items]

    @classmethod
    def from_texts(cls, texts: Iterable[str], source: str, scores: Sequence[float | None] | None = None) -> RetrievedContext:
        texts = list(texts)
        scores = list(scores) if scores is not None else [None] * len(texts)
        return cls(tuple(ContextItem(t, source, s, r) for r, (t, s) in enumerate(zip(texts, scores), start=1)))


@dataclass
class AnswerRecord:
    question: str
    answer: str
    context: RetrievedContext
    pipeline: str
    filter: MetadataFilter = field(default_factory=MetadataFilter)
    timing: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "question": self.question,
            "answer": self.answer,
            "pipeline": self.pipeline,
            "filter": self.filter.to_dict(),
            "context": [i.to_dict() for i in self.context.items],
        }
        if include_timing:
            out["timing"] = dict(self.timing)
        return out


@dataclass
class RetrievalSettings:
    k_candidates: int = 20
    k_context: int = 4
    dfs_depth: int = 1
    temperature: float = 0.0
    max_output_tokens: int = 1024
    # off by default: the fused context is not truncated
    max_context_chars: int | None = None

    def __post_init__(self) -> None:
        if self.k_candidates < 1 or self.k_context < 1:
            raise ValueError("k_candidates and k_context must be >= 1")
        if self.k_context > self.k_candidates:
            raise ValueError(f"k_context ({self.k_context}) cannot exceed k_candidates ({self.k_candidates})")
        if self.dfs_depth < 1:
            raise ValueError("dfs_depth must be >= 1")


def vector_retrieve(
    question: str,
    filter: MetadataFilter | None,
    index: VectorIndex,
    embedder: Embedder,
    k_candidates: int = 20,
    k_context: int = 4,
) -> RetrievedContext:
    if k_context > k_candidates:
        raise ValueError("k_context cannot exceed k_candidates")
    (qv,) = embedder.embed([question])
    candidates = index.query(qv, k_candidates, filter)
    # plain score truncation of the candidate list; no re-ranker
    kept = candidates[:k_context]
    return RetrievedContext.from_texts([s.chunk.text for s in kept], "vector", [s.score for s in kept])


def graph_retrieve_context(
    question: str,
    filter: MetadataFilter | None,
    graph: KnowledgeGraph,
    depth: int = 1,
) -> RetrievedContext:
    entities = link_entities(question, graph)
    edges = retrieve_subgraph(entities, graph, depth, filter)
    return RetrievedContext.from_texts(render_subgraph(edges, graph), "graph")


def fuse_contexts(vc: RetrievedContext, gc: RetrievedContext) -> RetrievedContext:
    items = [*vc.items, *gc.items]
    return RetrievedContext(tuple(
        ContextItem(i.text, i.source, i.score, rank) for rank, i in enumerate(items, start=1)
    ))


def cap_context(ctx: RetrievedContext, max_chars: int | None) -> RetrievedContext:
    """Drop trailing items until the rendered context fits ``max_chars``."""
    if max_chars is None:
        return ctx
    items = list(ctx.items)
    while items and len(RetrievedContext(tuple(items)).rendered) > max_chars:
        items.pop()
    return RetrievedContext(tuple(items))


def answer_prompt(question: str, ctx: RetrievedContext, template: str | None = None) -> str:
    return fill(template or load_template("answer.txt"), context=ctx.rendered, question=question)


def generate_answer(
    question: str,
    ctx: RetrievedContext,
    chat: ChatProvider,
    template: str | None = None,
    temperature: float = 0.0,
    max_output_tokens: int = 1024,
) -> str:
    if not question.strip():
        raise ValueError("question is empty")
    req = ChatRequest(ANSWER_SYSTEM, answer_prompt(question, ctx, template), temperature, max_output_tokens)
    return chat.chat(req)


class RAGEngine:
    """Read-only bundle of stores and providers shared by concurrent runs."""

    def __init__(
        self,
        embedder: Embedder,
        chat: ChatProvider,
        index: VectorIndex | None = None,
        graph: KnowledgeGraph | None = None,
        settings: RetrievalSettings | None = None,
        answer_template: str | None = None,
    ):
        self.embedder = embedder
        self.chat = chat
        self.index = index
        self.graph = graph
        self.settings = settings or RetrievalSettings()
        self.answer_template = answer_template or load_template("answer.txt")

    def vector_context(self, question: str, filter: MetadataFilter | None) -> RetrievedContext:
        if self.index is None:
            raise ValueError("the vector pipeline needs a vector index")
        s = self.settings
        return vector_retrieve(question, filter, self.index, self.embedder, s.k_candidates, s.k_context)

    def graph_context(self, question: str, filter: MetadataFilter | None) -> RetrievedContext:
        if self.graph is None:
            raise ValueError("the graph pipeline needs a knowledge graph")
        return graph_retrieve_context(question, filter, self.graph, self.settings.dfs_depth)

    def retrieve(self, kind: str, question: str, filter: MetadataFilter | None) -> tuple[RetrievedContext, dict[str, float]]:
        timing: dict[str, float] = {}

        def stage(name, fn):
            t0 = time.perf_counter()
            try:
                return fn(question, filter)
            except (HybridRAGError, ValueError) as exc:
                raise StageError(name, exc) from exc
            finally:
                timing[name] = time.perf_counter() - t0

        if kind == "vector":
            ctx = stage("vector_retrieve", self.vector_context)
        elif kind == "graph":
            ctx = stage("graph_retrieve", self.graph_context)
        elif kind == "hybrid":
            ctx = fuse_contexts(stage("vector_retrieve", self.vector_context), stage("graph_retrieve", self.graph_context))
        else:
            raise ValueError(f"unknown pipeline {kind!r}; expected one of {', '.join(PIPELINES)}")
        return cap_context(ctx, self.settings.max_context_chars), timing

    def run(self, kind: str, question: str, filter: MetadataFilter | None = None) -> AnswerRecord:
        filter = filter or MetadataFilter()
        ctx, timing = self.retrieve(kind, question, filter)
        t0 = time.perf_counter()
        try:
            answer = generate_answer(
                question, ctx, self.chat, self.answer_template,
                self.settings.temperature, self.settings.max_output_tokens,
            )
        except (HybridRAGError, ValueError) as exc:
            raise StageError("generate_answer", exc) from exc
        timing["generate_answer"] = time.perf_counter() - t0
        return AnswerRecord(question, answer, ctx, kind, filter, timing)


def run_pipeline(engine: RAGEngine, kind: str, question: str, filter: MetadataFilter | None = None) -> AnswerRecord:
    return engine.run(kind, question, filter)


def records_to_jsonl(records: Iterable[AnswerRecord], include_timing: bool = False) -> str:
    return "".join(json.dumps(r.to_dict(include_timing), ensure_ascii=False, sort_keys=True) + "\n" for r in records)


RECORD_CSV_FIELDS = ("question", "answer", "contexts", "ground_truth", "pipeline")


def records_to_csv(rows: Iterable[dict]) -> str:
    """Flat CSV; ``contexts`` is a JSON array of context strings."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RECORD_CSV_FIELDS, lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({
            "question": row["question"],
            "answer": row["answer"],
            "contexts": json.dumps(list(row["contexts"]), ensure_ascii=False),
            "ground_truth": row.get("ground_truth", ""),
            "pipeline": row["pipeline"],
        })
    return buf.getvalue()

