from __future__ import annotations

import csv
import io
import json

import pytest

from hybridrag import kg
from hybridrag.errors import StageError
from hybridrag.ingest import DocumentChunk, DocumentMeta
from hybridrag.pipelines import (
    ANSWER_SYSTEM, AnswerRecord, ContextItem, RAGEngine, RetrievalSettings, RetrievedContext, answer_prompt,
    cap_context, fuse_contexts, generate_answer, graph_retrieve_context, records_to_csv, records_to_jsonl,
    run_pipeline, vector_retrieve,
)
from hybridrag.providers import CallableChat, HashEmbedder, ScriptedChat
from hybridrag.templates import CANNOT_ANSWER
from hybridrag.vectorstore import IndexEntry, MetadataFilter, VectorIndex

from test_acceptance import scan_oracle

ACME = DocumentMeta("ACME-Q1", "Acme", "Q1", "FY2024")
BETA = DocumentMeta("BETA-Q1", "Beta", "Q1", "FY2024")

TEXTS = [
    ("Acme reported steady revenue in the quarter.", ACME),
    ("Margins improved on lower freight costs.", ACME),
    ("The zephyrium programme ramped ahead of plan.", ACME),
    ("Beta guided cautiously for the next quarter.", BETA),
    ("Headcount was broadly flat year on year.", BETA),
]

KEYWORD_Q = "Where does zephyrium stand?"


@pytest.fixture
def embedder():
    return HashEmbedder(64)


@pytest.fixture
def index(embedder):
    idx = VectorIndex(64)
    chunks = [DocumentChunk(f"{m.doc_id}:vector:{i:04d}", m.doc_id, text, 0, len(text), m) for i, (text, m) in enumerate(TEXTS)]
    idx.upsert(IndexEntry(c, v) for c, v in zip(chunks, embedder.embed([c.text for c in chunks])))
    return idx


def trip(head, rel, obj, company="Acme", chunk="c1"):
    return kg.Triplet(head, "Company", rel, obj, "Other", {"company": company, "quarter": "Q1", "fiscal_year": "FY2024", "chunk_id": chunk})


@pytest.fixture
def graph():
    return kg.build_graph([
        trip("Acme", "reported", "revenue growth"),
        trip("Acme", "acquired", "Nimbus", company="Beta"),
        trip("Orion", "partnered with", "Acme", company="Beta"),
        trip("Nimbus", "located in", "Oslo"),
    ])


def test_keyword_chunk_ranks_first(index, embedder):
    ctx = vector_retrieve(KEYWORD_Q, None, index, embedder)
    assert ctx.items[0].text == TEXTS[2][0]
    (qv,) = embedder.embed([KEYWORD_Q])
    oracle = scan_oracle(index.entries(), qv.values, 20, MetadataFilter())
    assert [i.score for i in ctx.items] == [s for _, s, _ in oracle[:4]]
    assert [i.source for i in ctx.items] == ["vector"] * 4


def test_vector_filter_and_cardinality(index, embedder):
    assert len(vector_retrieve("anything", MetadataFilter(company="Nobody"), index, embedder)) == 0
    assert len(vector_retrieve("anything", None, index, embedder, k_candidates=20, k_context=20)) == 5
    assert {i.text for i in vector_retrieve("quarter", MetadataFilter(company="beta"), index, embedder).items} <= {t for t, m in TEXTS if m is BETA}
    with pytest.raises(ValueError):
        vector_retrieve("x", None, index, embedder, k_candidates=2, k_context=3)


def test_graph_context_counts(graph):
    ctx = graph_retrieve_context("What did Acme do?", None, graph)
    assert len(ctx) == 3
    assert ctx.texts == ["Acme —reported→ revenue growth", "Acme —acquired→ Nimbus", "Orion —partnered with→ Acme"]
    assert len(graph_retrieve_context("How was demand?", None, graph)) == 0
    assert len(graph_retrieve_context("What did Acme do?", MetadataFilter(company="Acme"), graph)) == 1


def ctx_of(n, source):
    return RetrievedContext.from_texts([f"{source} {i}" for i in range(n)], source)


def test_fuse():
    fused = fuse_contexts(ctx_of(4, "vector"), ctx_of(3, "graph"))
    assert [(i.rank, i.source) for i in fused.items] == [(1, "vector"), (2, "vector"), (3, "vector"), (4, "vector"), (5, "graph"), (6, "graph"), (7, "graph")]
    assert fuse_contexts(RetrievedContext(), ctx_of(2, "graph")).items == ctx_of(2, "graph").items
    assert fuse_contexts(ctx_of(2, "vector"), RetrievedContext()).items == ctx_of(2, "vector").items


def test_context_rendering_and_rank_check():
    ctx = fuse_contexts(ctx_of(1, "vector"), ctx_of(1, "graph"))
    assert ctx.rendered == "[vector:1] vector 0\n\n[graph:2] graph 0"
    with pytest.raises(ValueError):
        RetrievedContext((ContextItem("x", "vector", None, 2),))


def test_cap_context():
    ctx = ctx_of(5, "vector")
    assert cap_context(ctx, None) is ctx
    capped = cap_context(ctx, 40)
    assert len(capped.rendered) <= 40 and capped.items == ctx.items[: len(capped)]


def test_generate_answer_uses_only_rendered_context():
    ctx = ctx_of(2, "vector")
    seen = []
    chat = CallableChat(lambda req: seen.append(req) or "Revenue grew.")
    assert generate_answer("What grew?", ctx, chat) == "Revenue grew."
    (req,) = seen
    assert req.system_prompt == ANSWER_SYSTEM
    assert req.user_prompt == answer_prompt("What grew?", ctx)
    assert ctx.rendered in req.user_prompt and (req.temperature, req.max_output_tokens) == (0.0, 1024)
    with pytest.raises(ValueError):
        generate_answer("  ", ctx, chat)


def test_empty_context_cannot_answer():
    empty = RetrievedContext()
    chat = ScriptedChat.from_pairs([(ANSWER_SYSTEM, answer_prompt("Q?", empty), CANNOT_ANSWER)])
    assert generate_answer("Q?", empty, chat) == CANNOT_ANSWER
    assert generate_answer("Q?", empty, chat) == CANNOT_ANSWER


def answering_engine(index, graph, embedder):
    def respond(req):
        body = req.user_prompt.split("CONTEXT:\n", 1)[1].split("\n\nQUESTION:", 1)[0]
        return body.split("\n\n")[0].split("] ", 1)[1] if body.strip() else CANNOT_ANSWER

    return RAGEngine(embedder, CallableChat(respond), index, graph, RetrievalSettings())


def test_run_pipeline_kinds(index, graph, embedder):
    engine = answering_engine(index, graph, embedder)
    hybrid = run_pipeline(engine, "hybrid", "What did Acme report?", None)
    vector = engine.run("vector", "What did Acme report?")
    graph_rec = engine.run("graph", "What did Acme report?")
    assert [i.text for i in hybrid.context.items] == vector.context.texts + graph_rec.context.texts
    assert set(hybrid.timing) == {"vector_retrieve", "graph_retrieve", "generate_answer"}

    free = engine.run("graph", "How was demand?")
    assert free.context.items == () and free.answer == CANNOT_ANSWER

    kw = engine.run("vector", KEYWORD_Q)
    assert kw.answer == TEXTS[2][0]


def test_stage_errors_name_stage(index, embedder):
    engine = RAGEngine(embedder, CallableChat(lambda r: "x"), index, None)
    with pytest.raises(StageError) as exc:
        engine.run("graph", "What?")
    assert exc.value.stage == "graph_retrieve"
    with pytest.raises(ValueError):
        engine.run("tabular", "What?")


def test_settings_validation():
    with pytest.raises(ValueError):
        RetrievalSettings(k_candidates=3, k_context=4)
    with pytest.raises(ValueError):
        RetrievalSettings(dfs_depth=0)


def test_provenance(index, graph, embedder):
    engine = answering_engine(index, graph, embedder)
    stored = {e.chunk.text for e in index.entries()}
    rendered = set(kg.render_subgraph(graph.edges, graph))
    for q in ("What did Acme report?", "Where is Nimbus?", KEYWORD_Q, "Orion news?"):
        rec = engine.run("hybrid", q)
        for item in rec.context.items:
            assert item.text in (stored if item.source == "vector" else rendered)


def test_record_serialisation(index, graph, embedder):
    engine = answering_engine(index, graph, embedder)
    rec = engine.run("hybrid", "What did Acme report?", MetadataFilter(company="Acme"))
    line = records_to_jsonl([rec])
    data = json.loads(line)
    assert "timing" not in data and data["filter"]["company"] == "Acme"
    assert records_to_jsonl([rec]) == line
    assert "timing" in rec.to_dict()
    out = records_to_csv([{"question": rec.question, "answer": rec.answer, "contexts": rec.context.texts, "ground_truth": "g", "pipeline": "hybrid"}])
    (row,) = csv.DictReader(io.StringIO(out))
    assert json.loads(row["contexts"]) == rec.context.texts
    assert list(row) == ["question", "answer", "contexts", "ground_truth", "pipeline"]


def test_answer_record_defaults():
    rec = AnswerRecord("q", "a", RetrievedContext(), "vector")
    assert rec.to_dict(include_timing=False)["context"] == []
