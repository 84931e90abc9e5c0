"""Command-line entry point: ingest, build-kg, query, evaluate, report, fixtures."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from filelock import FileLock, Timeout

from hybridrag import evalsuite, kg
from hybridrag.config import EngineConfig, load_config
from hybridrag.errors import ExtractionError, HybridRAGError, LoadError, ValidationError
from hybridrag.fixtures import SyntheticResponder, synthetic_corpus, write_fixture_config
from hybridrag.ingest import DocumentChunk, chunk_corpus, load_corpus
from hybridrag.pipelines import PIPELINE_LABELS, PIPELINES, AnswerRecord, RAGEngine, records_to_csv
from hybridrag.providers import (
    ChatProvider, Embedder, HashEmbedder, HTTPProvider, RecordingChat, ScriptedChat,
)
from hybridrag.templates import load_template
from hybridrag.vectorstore import IndexEntry, MetadataFilter, VectorIndex

logger = logging.getLogger("hybridrag")

GT_COLUMNS = ("question", "ground_truth", "company", "quarter", "fiscal_year")


class Workspace:
    """Config plus lazily constructed providers and stores."""

    def __init__(self, cfg: EngineConfig, chat: ChatProvider | None = None, embedder: Embedder | None = None):
        self.cfg = cfg
        self._chat = chat
        self._embedder = embedder

    @property
    def embedder(self) -> Embedder:
        if self._embedder is None:
            if self.cfg.get("embedding", "kind") == "http":
                self._embedder = HTTPProvider(self.cfg.provider_config("embedding"))
            else:
                self._embedder = HashEmbedder(int(self.cfg.get("embedding", "dim")), self.cfg.get("embedding", "seed"))
        return self._embedder

    @property
    def chat(self) -> ChatProvider:
        if self._chat is None:
            kind = self.cfg.get("chat", "kind")
            if kind == "http":
                self._chat = HTTPProvider(self.cfg.provider_config("chat"))
            elif kind == "synthetic":
                self._chat = SyntheticResponder()
            else:
                path = self.cfg.path("chat", "fixtures")
                if path is None:
                    raise ValidationError("chat.fixtures is required for the scripted chat provider")
                self._chat = ScriptedChat.from_file(path)
        return self._chat

    def template(self, name: str) -> str:
        return load_template(name, self.cfg.path("kg", "prompt_dir"))

    def load_index(self) -> VectorIndex:
        path = self.cfg.index_path
        if not path.exists():
            raise LoadError(path, f"vector index not found: {path} (run 'hybridrag ingest' first)")
        return VectorIndex.load(path)

    def load_graph(self) -> kg.KnowledgeGraph:
        path = self.cfg.graph_path
        if not path.exists():
            raise LoadError(path, f"knowledge graph not found: {path} (run 'hybridrag build-kg' first)")
        return kg.load_graph(path)

    def engine(self, kind: str) -> RAGEngine:
        if kind not in PIPELINES:
            raise ValidationError(f"unknown pipeline {kind!r}")
        index = self.load_index() if kind in ("vector", "hybrid") else None
        graph = self.load_graph() if kind in ("graph", "hybrid") else None
        return RAGEngine(self.embedder, self.chat, index, graph, self.cfg.retrieval_settings(), self.template("answer.txt"))

    def corpus(self):
        root = self.cfg.path("corpus", "root")
        manifest = self.cfg.path("corpus", "manifest")
        return load_corpus(root, manifest)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="")
    tmp.replace(path)


def run_ingest(ws: Workspace) -> dict:
    documents = ws.corpus()
    chunks = chunk_corpus(documents, ws.cfg.vector_chunking())
    vectors = ws.embedder.embed([c.text for c in chunks]) if chunks else []
    dim = vectors[0].dim if vectors else int(ws.cfg.get("embedding", "dim"))
    index = VectorIndex(dim)
    index.upsert(IndexEntry(c, v) for c, v in zip(chunks, vectors))
    ws.cfg.work_dir.mkdir(parents=True, exist_ok=True)
    index.save(ws.cfg.index_path)
    _write_text(ws.cfg.chunks_path, "".join(json.dumps(c.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for c in chunks))
    return {"documents": len(documents), "chunks": len(chunks), "dim": dim, "index": str(ws.cfg.index_path)}


def _process_chunk(ws: Workspace, chunk: DocumentChunk, templates: dict) -> dict:
    s = ws.cfg.retrieval_settings()
    refined = kg.refine_chunk(chunk, ws.chat, templates["refine"], s.temperature, s.max_output_tokens)
    entry = {"refined": refined, "triplets": [], "metadata": [], "skipped": 0, "error": None}
    try:
        result = kg.extract_triplets(
            refined, chunk.meta, ws.chat, chunk.chunk_id, templates["extract"], templates["verbs"],
            s.temperature, s.max_output_tokens,
        )
    except (ExtractionError, ValueError) as exc:
        # unparseable output costs one chunk, not the build
        logger.warning("extraction failed for chunk %s: %s", chunk.chunk_id, exc)
        entry["error"] = {"message": str(exc), "raw": getattr(exc, "raw", "")}
        return entry
    entry["triplets"] = [t.to_nested() for t in result.triplets]
    entry["metadata"] = [dict(t.metadata) for t in result.triplets]
    entry["skipped"] = result.skipped
    return entry


def run_build_kg(ws: Workspace) -> dict:
    documents = ws.corpus()
    chunks = chunk_corpus(documents, ws.cfg.kg_chunking())
    if not chunks:
        logger.warning("corpus is empty; writing an empty knowledge graph")
    ws.cfg.work_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = ws.cfg.checkpoint_path
    done: dict[str, dict] = {}
    if checkpoint.exists():
        done = json.loads(checkpoint.read_text(encoding="utf-8")).get("chunks", {})
        logger.info("resuming from checkpoint with %d processed chunks", len(done))
    templates = {
        "refine": ws.template("refine.txt"),
        "extract": ws.template("extract.txt"),
        "verbs": [v.strip() for v in ws.template("relation_verbs.txt").splitlines() if v.strip()],
    }
    todo = [c for c in chunks if c.chunk_id not in done]
    failure: HybridRAGError | None = None
    with ThreadPoolExecutor(max_workers=int(ws.cfg.get("kg", "workers"))) as pool:
        futures = [(c, pool.submit(_process_chunk, ws, c, templates)) for c in todo]
        for chunk, fut in futures:
            try:
                done[chunk.chunk_id] = fut.result()
            except HybridRAGError as exc:
                failure = failure or exc
    if failure is not None:
        _write_text(checkpoint, json.dumps({"chunks": done}, sort_keys=True, ensure_ascii=False, indent=1) + "\n")
        raise failure

    triplets: list[kg.Triplet] = []
    skipped = 0
    failed = []
    audit = []
    for chunk in chunks:
        entry = done[chunk.chunk_id]
        skipped += entry["skipped"]
        if entry["error"]:
            failed.append(chunk.chunk_id)
        for row, meta in zip(entry["triplets"], entry["metadata"]):
            triplets.append(kg.Triplet(*row[:5], metadata=meta, source=row[5]))
        audit.append({"chunk_id": chunk.chunk_id, "refined": entry["refined"], "error": entry["error"]})
    graph = kg.build_graph(triplets)
    kg.save_graph(graph, ws.cfg.graph_path)
    kg.dump_triplets(triplets, ws.cfg.triplets_path)
    _write_text(ws.cfg.work_dir / "refined.jsonl", "".join(json.dumps(a, sort_keys=True, ensure_ascii=False) + "\n" for a in audit))
    report = {
        "documents": len(documents),
        "chunks": len(chunks),
        "triplets": len(triplets),
        "nodes": len(graph.nodes),
        "edges": len(graph.edges),
        "skipped_triplets": skipped,
        "failed_chunks": failed,
    }
    _write_text(ws.cfg.kg_report_path, json.dumps(report, indent=1, sort_keys=True) + "\n")
    if checkpoint.exists():
        checkpoint.unlink()
    return report


def make_filter(company=None, quarter=None, year=None) -> MetadataFilter:
    return MetadataFilter(company or None, quarter or None, year or None)


def read_ground_truth(path: Path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in GT_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ValidationError(f"ground truth {path} is missing columns: {', '.join(missing)}")
            rows = list(reader)
    except FileNotFoundError:
        raise LoadError(path, f"ground truth file not found: {path}") from None
    seen = set()
    for i, row in enumerate(rows):
        if not (row["question"] or "").strip():
            raise ValidationError(f"ground truth row {i + 1} has an empty question")
        key = (row["question"], row["company"])
        if key in seen:
            raise ValidationError(f"duplicate (question, company) in ground truth row {i + 1}: {key}")
        seen.add(key)
    return rows


def _digest_file(h, path: Path | None) -> None:
    if path is not None and path.exists():
        h.update(path.name.encode())
        h.update(hashlib.sha256(path.read_bytes()).digest())


def run_directory(ws: Workspace, kind: str, gt_path: Path) -> Path:
    """Content-addressed run directory: same config and inputs, same directory."""
    h = hashlib.sha256()
    h.update(ws.cfg.fingerprint().encode())
    h.update(kind.encode())
    _digest_file(h, gt_path)
    if kind in ("vector", "hybrid"):
        _digest_file(h, ws.cfg.index_path)
    if kind in ("graph", "hybrid"):
        _digest_file(h, ws.cfg.graph_path)
    if ws.cfg.get("chat", "kind") == "scripted":
        _digest_file(h, ws.cfg.path("chat", "fixtures"))
    return ws.cfg.runs_dir / f"{kind}-{h.hexdigest()[:12]}"


def aggregate_csv(label: str, aggregate: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["metric", label])
    for m in evalsuite.METRICS:
        writer.writerow([evalsuite.METRIC_ABBREV[m], evalsuite.format_metric(aggregate[m])])
    return buf.getvalue()


def format_table(columns: dict[str, dict[str, str]]) -> str:
    """Metrics as rows, pipelines as columns."""
    labels = list(columns)
    width = max([8, *(len(lb) for lb in labels)])
    lines = ["metric".ljust(6) + "".join(lb.rjust(width + 2) for lb in labels)]
    for m in evalsuite.METRICS:
        ab = evalsuite.METRIC_ABBREV[m]
        lines.append(ab.ljust(6) + "".join(columns[lb].get(ab, "NA").rjust(width + 2) for lb in labels))
    return "\n".join(lines) + "\n"


def table_csv(columns: dict[str, dict[str, str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["metric", *columns])
    for m in evalsuite.METRICS:
        ab = evalsuite.METRIC_ABBREV[m]
        writer.writerow([ab, *(columns[lb].get(ab, "NA") for lb in columns)])
    return buf.getvalue()


def run_evaluate(ws: Workspace, kind: str, gt_path: Path | None = None) -> tuple[Path, dict]:
    gt_path = gt_path or ws.cfg.path("corpus", "ground_truth")
    rows = read_ground_truth(gt_path)
    engine = ws.engine(kind)
    run_dir = run_directory(ws, kind, gt_path)
    ws.cfg.runs_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(ws.cfg.runs_dir / f".{run_dir.name}.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise HybridRAGError(f"run directory {run_dir} is locked by another invocation") from None
    try:
        return run_dir, _evaluate_locked(ws, engine, kind, rows, run_dir)
    finally:
        lock.release()


def _evaluate_locked(ws: Workspace, engine: RAGEngine, kind: str, rows: list[dict], run_dir: Path) -> dict:
    answers: list[AnswerRecord | None] = []
    errors: list[str | None] = []
    for row in rows:
        try:
            answers.append(engine.run(kind, row["question"], make_filter(row["company"], row["quarter"], row["fiscal_year"])))
            errors.append(None)
        except HybridRAGError as exc:
            logger.warning("pipeline failed for %r: %s", row["question"][:60], exc)
            answers.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")

    ok = [i for i, a in enumerate(answers) if a is not None]
    if not ok:
        raise HybridRAGError(f"every one of the {len(rows)} ground-truth rows failed; first error: {errors[0]}")
    eval_records = [
        evalsuite.EvalRecord(answers[i].question, answers[i].answer or " ", tuple(answers[i].context.texts), rows[i]["ground_truth"] or " ")
        for i in ok
    ]
    batch = evalsuite.evaluate_batch(eval_records, ws.chat, ws.embedder, ws.cfg.eval_config())
    reports: list = [None] * len(rows)
    for pos, i in enumerate(ok):
        reports[i] = batch.reports[pos]
        if batch.errors[pos]:
            errors[i] = batch.errors[pos]
    aggregate, counts = evalsuite.aggregate_reports(reports)

    lines, csv_rows, timings = [], [], []
    for i, row in enumerate(rows):
        a = answers[i]
        rec = {
            "index": i,
            "question": row["question"],
            "ground_truth": row["ground_truth"],
            "pipeline": kind,
            "filter": make_filter(row["company"], row["quarter"], row["fiscal_year"]).to_dict(),
            "answer": a.answer if a else None,
            "context": [c.to_dict() for c in a.context.items] if a else [],
            "metrics": reports[i].to_dict() if reports[i] else None,
            "error": errors[i],
        }
        lines.append(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
        csv_rows.append({
            "question": row["question"],
            "answer": a.answer if a else "",
            "contexts": a.context.texts if a else [],
            "ground_truth": row["ground_truth"],
            "pipeline": kind,
        })
        timings.append(json.dumps({"index": i, "timing": a.timing if a else {}}, sort_keys=True) + "\n")

    label = PIPELINE_LABELS[kind]
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_text(run_dir / "config.echo", json.dumps(ws.cfg.echo(), indent=1, sort_keys=True) + "\n")
    _write_text(run_dir / "records.jsonl", "".join(lines))
    _write_text(run_dir / "records.csv", records_to_csv(csv_rows))
    _write_text(run_dir / "aggregate.csv", aggregate_csv(label, aggregate))
    _write_text(run_dir / "aggregate.json", json.dumps({"pipeline": kind, "means": aggregate, "counts": counts}, indent=1, sort_keys=True) + "\n")
    _write_text(run_dir / "timings.jsonl", "".join(timings))
    table = format_table({label: {evalsuite.METRIC_ABBREV[m]: evalsuite.format_metric(aggregate[m]) for m in evalsuite.METRICS}})
    summary = f"{table}\nrecords: {counts['records']}  evaluated: {counts['evaluated']}  skipped: {counts['skipped']}\n"
    _write_text(run_dir / "report.txt", summary)
    return {"aggregate": aggregate, "counts": counts, "table": table}


def read_aggregate(run_dir: Path) -> tuple[str, dict[str, str]] | None:
    path = Path(run_dir) / "aggregate.csv"
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        logger.warning("%s has no aggregate.csv; skipping", run_dir)
        return None
    expected = [evalsuite.METRIC_ABBREV[m] for m in evalsuite.METRICS]
    if len(rows) != 5 or len(rows[0]) != 2 or rows[0][0] != "metric" or [r[0] for r in rows[1:]] != expected:
        logger.warning("%s is malformed; skipping", path)
        return None
    if any(len(r) != 2 for r in rows[1:]):
        logger.warning("%s is malformed; skipping", path)
        return None
    return rows[0][1], {r[0]: r[1] for r in rows[1:]}


def run_report(run_dirs: Sequence[Path], out: Path | None = None) -> tuple[str, str]:
    columns: dict[str, dict[str, str]] = {}
    for d in run_dirs:
        found = read_aggregate(Path(d))
        if found is not None:
            label, values = found
            columns[label] = values
    if not columns:
        raise HybridRAGError("no run directory contained a valid aggregate.csv")
    order = {lb: i for i, lb in enumerate(PIPELINE_LABELS.values())}
    columns = dict(sorted(columns.items(), key=lambda kv: (order.get(kv[0], len(order)), kv[0])))
    text, csv_text = format_table(columns), table_csv(columns)
    if out is not None:
        _write_text(Path(out), csv_text)
    return text, csv_text


def generate_fixtures(out_dir: Path) -> dict:
    """Write the synthetic corpus and record scripted chat fixtures for it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = synthetic_corpus(out_dir)
    config_path = write_fixture_config(out_dir)
    recorder = RecordingChat(SyntheticResponder())
    scratch = Path(tempfile.mkdtemp(prefix="hybridrag-fixtures-"))
    try:
        cfg = load_config(config_path, [f'paths.work_dir="{scratch / "work"}"', f'paths.runs_dir="{scratch / "runs"}"'])
        ws = Workspace(cfg, chat=recorder)
        run_ingest(ws)
        report = run_build_kg(ws)
        for kind in PIPELINES:
            run_evaluate(ws, kind)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)
    recorder.dump(out_dir / "chat_fixtures.json")
    return {**stats, "scripted_responses": len(recorder.recorded), "graph": report}


def _overrides(args) -> list[str]:
    items = list(args.set or [])
    for flag, key in (("k_candidates", "retrieval.k_candidates"), ("k_context", "retrieval.k_context"),
                      ("dfs_depth", "retrieval.dfs_depth")):
        value = getattr(args, flag, None)
        if value is not None:
            items.append(f"{key}={value}")
    return items


def _workspace(args) -> Workspace:
    return Workspace(load_config(args.config, _overrides(args)))


def cmd_ingest(args) -> int:
    stats = run_ingest(_workspace(args))
    print(f"documents: {stats['documents']}  chunks: {stats['chunks']}  index: {stats['index']}")
    return 0


def cmd_build_kg(args) -> int:
    report = run_build_kg(_workspace(args))
    print(
        f"chunks: {report['chunks']}  triplets: {report['triplets']}  nodes: {report['nodes']}  "
        f"edges: {report['edges']}  skipped triplets: {report['skipped_triplets']}  "
        f"failed chunks: {len(report['failed_chunks'])}"
    )
    return 0


def cmd_query(args) -> int:
    ws = _workspace(args)
    record = ws.engine(args.pipeline).run(args.pipeline, args.question, make_filter(args.company, args.quarter, args.year))
    out = Path(args.out) if args.out else ws.cfg.work_dir / "query_record.json"
    _write_text(out, json.dumps(record.to_dict(), indent=1, sort_keys=True, ensure_ascii=False) + "\n")
    print(record.answer)
    return 0


def cmd_evaluate(args) -> int:
    ws = _workspace(args)
    gt = Path(args.ground_truth) if args.ground_truth else None
    kinds = PIPELINES if args.pipeline == "all" else (args.pipeline,)
    run_dirs = []
    for kind in kinds:
        run_dir, result = run_evaluate(ws, kind, gt)
        run_dirs.append(run_dir)
        print(f"{kind}: {run_dir}")
        print(result["table"], end="")
    if len(run_dirs) > 1:
        text, _ = run_report(run_dirs, ws.cfg.runs_dir / "comparison.csv")
        print(text, end="")
    return 0


def cmd_report(args) -> int:
    text, _ = run_report([Path(d) for d in args.run_dirs], Path(args.out))
    print(text, end="")
    return 0


def cmd_fixtures(args) -> int:
    stats = generate_fixtures(Path(args.out))
    print(
        f"documents: {stats['documents']}  questions: {stats['questions']}  "
        f"scripted responses: {stats['scripted_responses']}  written to {args.out}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridrag", description="VectorRAG / GraphRAG / HybridRAG engine")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", help="TOML config file (or a config.echo from a run directory)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        return p

    with_config(sub.add_parser("ingest", help="chunk the corpus and build the vector index")).set_defaults(fn=cmd_ingest)
    with_config(sub.add_parser("build-kg", help="extract triplets and build the knowledge graph")).set_defaults(fn=cmd_build_kg)

    q = with_config(sub.add_parser("query", help="answer one question"))
    q.add_argument("--pipeline", choices=PIPELINES, default="hybrid")
    q.add_argument("--question", required=True)
    q.add_argument("--company")
    q.add_argument("--quarter")
    q.add_argument("--year", help="fiscal year, e.g. FY2024")
    q.add_argument("--out", help="where to write the answer record JSON")
    q.add_argument("--k-candidates", dest="k_candidates", type=int)
    q.add_argument("--k-context", dest="k_context", type=int)
    q.add_argument("--dfs-depth", dest="dfs_depth", type=int)
    q.set_defaults(fn=cmd_query)

    e = with_config(sub.add_parser("evaluate", help="run a pipeline over the ground truth and score it"))
    e.add_argument("--pipeline", choices=(*PIPELINES, "all"), default="all")
    e.add_argument("--ground-truth", help="ground truth CSV (defaults to corpus.ground_truth)")
    e.add_argument("--k-candidates", dest="k_candidates", type=int)
    e.add_argument("--k-context", dest="k_context", type=int)
    e.add_argument("--dfs-depth", dest="dfs_depth", type=int)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("report", help="merge run directories into one comparison table")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--out", default="comparison.csv")
    r.set_defaults(fn=cmd_report)

    f = sub.add_parser("fixtures", help="synthetic fixture tooling")
    fsub = f.add_subparsers(dest="fixtures_command", required=True)
    g = fsub.add_parser("generate", help="write the synthetic corpus and scripted chat fixtures")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_fixtures)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except HybridRAGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
