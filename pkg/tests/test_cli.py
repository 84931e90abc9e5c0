from __future__ import annotations

import json
import shutil

import pytest
from filelock import FileLock

from hybridrag import kg
from hybridrag.cli import Workspace, main, run_build_kg, run_directory, run_evaluate
from hybridrag.config import load_config
from hybridrag.errors import HybridRAGError
from hybridrag.providers import CallableChat, RecordingChat
from hybridrag.templates import CANNOT_ANSWER

DOCS = {
    "ACME-Q1": ("Acme", "Acme reported revenue growth of 12 percent. Acme acquired Nimbus, based in Oslo."),
    "ACME-Q2": ("Acme", "Acme reported revenue and margins. Orion competes with Nimbus."),
}

# ten triplets, three of them duplicates of an earlier one in the same chunk
EXTRACTIONS = {
    "ACME-Q1": [
        ["Acme", "Company", "reported", "revenue", "Metric", "s"],
        ["Acme", "Company", "acquired", "Nimbus", "Company", "s"],
        ["Nimbus", "Company", "located in", "Oslo", "Location", "s"],
        ["ACME", "Company", "reported", "Revenue", "Metric", "s"],
        ["Orion", "Company", "partnered with", "Acme", "Company", "s"],
    ],
    "ACME-Q2": [
        ["Acme", "Company", "reported", "revenue", "Metric", "s"],
        ["Acme", "Company", "reported", "margins", "Metric", "s"],
        ["Orion", "Company", "competes with", "Nimbus", "Company", "s"],
        ["acme", "Company", "reported", "margins", "Metric", "s"],
        ["Orion", "Company", "competes with", "Nimbus.", "Company", "s"],
    ],
}


def write_corpus(root, docs=DOCS, config_extra=""):
    (root / "corpus").mkdir(parents=True)
    manifest = []
    for doc_id, (company, text) in docs.items():
        name = f"{doc_id.lower()}.txt"
        (root / "corpus" / name).write_text(text, encoding="utf-8")
        manifest.append({"file": name, "doc_id": doc_id, "company": company, "quarter": doc_id[-2:], "fiscal_year": "FY2024"})
    (root / "corpus" / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")
    (root / "config.toml").write_text('[chat]\nkind = "scripted"\nfixtures = "chat.json"\n' + config_extra, encoding="utf-8")
    return root / "config.toml"


def responder(calls=None):
    def respond(req):
        if calls is not None:
            calls.append(req.system_prompt)
        if req.system_prompt == kg.REFINE_SYSTEM:
            return next(text for _, text in DOCS.values() if text in req.user_prompt)
        if req.system_prompt == kg.EXTRACT_SYSTEM:
            for doc_id, (_, text) in DOCS.items():
                if text in req.user_prompt:
                    return json.dumps(EXTRACTIONS[doc_id])
            return "[]"
        return f"Answer from context: {req.user_prompt.count('[')} items"

    return CallableChat(respond)


@pytest.fixture
def small(tmp_path):
    return write_corpus(tmp_path / "ws")


def test_ingest(small, capsys):
    assert main(["ingest", "-c", str(small)]) == 0
    out = capsys.readouterr().out
    assert "documents: 2" in out and "chunks: 2" in out
    index = small.parent / "work" / "index.hrvx"
    first = index.read_bytes()
    assert main(["ingest", "-c", str(small)]) == 0
    assert index.read_bytes() == first


def test_ingest_missing_manifest(small, capsys):
    (small.parent / "corpus" / "manifest.json").unlink()
    assert main(["ingest", "-c", str(small)]) == 1
    assert "manifest.json" in capsys.readouterr().err


def test_build_kg_counts(small):
    report = run_build_kg(Workspace(load_config(small), chat=responder()))
    assert (report["triplets"], report["edges"], report["nodes"]) == (10, 7, 6)
    assert report["failed_chunks"] == []
    graph = kg.load_graph(small.parent / "work" / "graph.jsonl")
    assert len(graph.edges) == 7
    loaded = kg.load_triplets(small.parent / "work" / "triplets.json")
    assert len(loaded) == 10


def test_build_kg_empty_corpus(tmp_path, caplog):
    cfg = write_corpus(tmp_path / "ws", docs={})
    report = run_build_kg(Workspace(load_config(cfg), chat=responder()))
    assert (report["chunks"], report["nodes"], report["edges"]) == (0, 0, 0)
    assert "empty" in caplog.text


def test_build_kg_unparseable_chunk_is_not_fatal(small):
    def respond(req):
        if req.system_prompt == kg.EXTRACT_SYSTEM and DOCS["ACME-Q2"][1] in req.user_prompt:
            return "I could not find any triplets."
        return responder().chat(req)

    report = run_build_kg(Workspace(load_config(small), chat=CallableChat(respond)))
    (failed,) = report["failed_chunks"]
    assert failed.startswith("ACME-Q2")
    assert report["edges"] == 4


def test_build_kg_key_miss_checkpoints_then_resumes(small, capsys):
    recorder = RecordingChat(responder())
    run_build_kg(Workspace(load_config(small), chat=recorder))
    recorder.dump(small.parent / "full.json")
    full = json.loads((small.parent / "full.json").read_text(encoding="utf-8"))
    shutil.rmtree(small.parent / "work")

    # drop the extraction reply for the second document
    partial = {k: v for k, v in full.items() if v != json.dumps(EXTRACTIONS["ACME-Q2"])}
    assert len(partial) == len(full) - 1
    (small.parent / "chat.json").write_text(json.dumps(partial), encoding="utf-8")
    assert main(["build-kg", "-c", str(small)]) == 1
    err = capsys.readouterr().err
    assert "ACME-Q2" in err
    checkpoint = json.loads((small.parent / "work" / "kg_checkpoint.json").read_text(encoding="utf-8"))
    assert list(checkpoint["chunks"]) == [c for c in checkpoint["chunks"] if c.startswith("ACME-Q1")]
    assert len(checkpoint["chunks"]) == 1

    calls = []
    report = run_build_kg(Workspace(load_config(small), chat=responder(calls)))
    assert len(calls) == 2  # only the missing chunk is refined and extracted again
    assert report["edges"] == 7
    assert not (small.parent / "work" / "kg_checkpoint.json").exists()


def test_query_pipelines(built_fixture, tmp_path, capsys):
    cfg = str(built_fixture / "config.toml")
    out = tmp_path / "q.json"
    question = "What revenue growth did Aurora Textiles report in Q1 FY2024?"
    args = ["query", "-c", cfg, "--question", question, "--company", "Aurora Textiles", "--quarter", "Q1", "--year", "FY2024"]
    assert main([*args, "--pipeline", "hybrid", "--out", str(out)]) == 0
    record = json.loads(out.read_text(encoding="utf-8"))
    assert record["answer"].strip() in capsys.readouterr().out
    sources = [c["source"] for c in record["context"]]
    assert sources == sorted(sources, key=lambda s: s != "vector")
    assert [c["rank"] for c in record["context"]] == list(range(1, len(sources) + 1))
    assert "vector" in sources and "graph" in sources

    free = "What did management say about demand conditions?"
    assert main(["query", "-c", cfg, "--pipeline", "graph", "--question", free, "--company", "Aurora Textiles",
                 "--quarter", "Q1", "--year", "FY2024", "--out", str(out)]) == 0
    record = json.loads(out.read_text(encoding="utf-8"))
    assert record["context"] == [] and record["answer"] == CANNOT_ANSWER


def test_query_without_index(small, capsys):
    assert main(["query", "-c", str(small), "--pipeline", "vector", "--question", "What grew?"]) == 1
    assert "index.hrvx" in capsys.readouterr().err


def test_evaluate_rejects_bad_ground_truth(built_fixture, tmp_path, capsys):
    bad = tmp_path / "gt.csv"
    bad.write_text("question,company,quarter,fiscal_year\nWhat grew?,Acme,Q1,FY2024\n", encoding="utf-8")
    assert main(["evaluate", "-c", str(built_fixture / "config.toml"), "--pipeline", "vector", "--ground-truth", str(bad)]) == 1
    assert "ground_truth" in capsys.readouterr().err


def test_evaluate_all_writes_comparison(evaluated_fixture):
    runs = next(iter(evaluated_fixture.values())).parent
    lines = (runs / "comparison.csv").read_bytes().decode("utf-8").split("\r\n")
    assert lines[0] == "metric,VectorRAG,GraphRAG,HybridRAG"
    for run_dir in evaluated_fixture.values():
        names = {p.name for p in run_dir.iterdir()}
        assert {"config.echo", "records.jsonl", "records.csv", "aggregate.csv", "aggregate.json", "timings.jsonl", "report.txt"} <= names
        records = (run_dir / "records.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(records) == 20
        assert all("timing" not in json.loads(r) for r in records)


def test_config_echo_reproduces_run_directory(built_fixture, evaluated_fixture):
    run_dir = evaluated_fixture["vector"]
    cfg = load_config(run_dir / "config.echo")
    ws = Workspace(cfg)
    assert run_directory(ws, "vector", cfg.path("corpus", "ground_truth")) == run_dir


def test_report_single_and_invalid(evaluated_fixture, tmp_path, caplog):
    empty = tmp_path / "not-a-run"
    empty.mkdir()
    out = tmp_path / "cmp.csv"
    assert main(["report", str(evaluated_fixture["graph"]), str(empty), "--out", str(out)]) == 0
    assert "not-a-run" in caplog.text and "skipping" in caplog.text
    rows = out.read_bytes().decode("utf-8").strip().split("\r\n")
    assert rows[0] == "metric,GraphRAG" and len(rows) == 5
    assert main(["report", str(empty), "--out", str(out)]) == 1


def test_concurrent_evaluation_is_refused(built_fixture):
    ws = Workspace(load_config(built_fixture / "config.toml"))
    gt = ws.cfg.path("corpus", "ground_truth")
    name = run_directory(ws, "vector", gt).name
    ws.cfg.runs_dir.mkdir(parents=True, exist_ok=True)
    with FileLock(str(ws.cfg.runs_dir / f".{name}.lock")):
        with pytest.raises(HybridRAGError, match="locked"):
            run_evaluate(ws, "vector")


def test_overrides_and_unknown_keys(small, capsys):
    cfg = load_config(small, ["retrieval.k_context=2", "retrieval.dfs_depth=2"])
    assert cfg.retrieval_settings().k_context == 2 and cfg.retrieval_settings().dfs_depth == 2
    assert cfg.fingerprint() != load_config(small).fingerprint()
    assert main(["ingest", "-c", str(small), "--set", "retrieval.nope=1"]) == 1
    assert "retrieval.nope" in capsys.readouterr().err
    assert main(["query", "-c", str(small), "--question", "q", "--k-candidates", "2", "--k-context", "3"]) == 1


def test_fixture_generation(tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["fixtures", "generate", "--out", str(out)]) == 0
    assert "documents: 10  questions: 20" in capsys.readouterr().out
    assert len(json.loads((out / "corpus" / "manifest.json").read_text(encoding="utf-8"))) == 10
    # regeneration matches the shipped fixture byte for byte
    from conftest import FIXTURE

    for name in ("chat_fixtures.json", "ground_truth.csv", "config.toml", "corpus/manifest.json"):
        assert (out / name).read_bytes() == (FIXTURE / name).read_bytes(), name
