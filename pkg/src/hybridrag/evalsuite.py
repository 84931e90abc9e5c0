"""Faithfulness, answer relevance, context precision and context recall.

Every metric is split into a judge step (an LLM call whose reply is parsed)
and a pure formula, so the formulas can be checked against brute-force
oracles and the judge can be replaced by scripted or rule-based providers.
"""

from __future__ import annotations

import logging
import math
import re
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from hybridrag.errors import HybridRAGError, MetricError
from hybridrag.providers import ChatProvider, ChatRequest, Embedder, cosine_similarity

logger = logging.getLogger(__name__)

METRICS = ("faithfulness", "answer_relevance", "context_precision", "context_recall")
METRIC_ABBREV = {"faithfulness": "F", "answer_relevance": "AR", "context_precision": "CP", "context_recall": "CR"}

STATEMENTS_SYSTEM = "You decompose answers into short, self-contained statements."
STATEMENTS_PROMPT = (
    "Given a question and answer, create one or more statements from each sentence in the given answer.\n"
    "question: {question}\n"
    "answer: {answer}\n\n"
    "Write one statement per line, without numbering."
)

VERIFY_SYSTEM = "You check whether statements are supported by a context."
VERIFY_PROMPT = (
    "Consider the given context and following statements, then determine whether they are supported by the "
    "information present in the context. Provide a brief explanation for each statement before arriving at the "
    "verdict (Yes/No). Provide a final verdict for each statement in order at the end in the given format. "
    "Do not deviate from the specified format.\n\n"
    "context: {context}\n\n"
    "{statements}\n\n"
    "Format of the last line: Final verdict: <Yes/No>, <Yes/No>, ... (one per statement, in order)"
)

QUESTION_SYSTEM = "You write the question that a given answer responds to. This is candidate {i} of {n}."
QUESTION_PROMPT = "Generate a question for the given answer.\nanswer: {answer}"

RELEVANCE_SYSTEM = "You judge whether a retrieved passage helps to reach a known correct answer."
RELEVANCE_PROMPT = (
    "question: {question}\n"
    "context: {context}\n"
    "ground truth answer: {ground_truth}\n\n"
    "Was this context useful in arriving at the ground truth answer? End with 'Verdict: Yes' or 'Verdict: No'."
)

ATTRIBUTION_SYSTEM = "You judge whether a sentence of a reference answer can be traced back to a context."
ATTRIBUTION_PROMPT = (
    "context: {context}\n\n"
    "sentence: {sentence}\n\n"
    "Can this sentence be attributed to the context? End with 'Verdict: Yes' or 'Verdict: No'."
)


@dataclass(frozen=True)
class EvalRecord:
    question: str
    answer: str
    contexts: tuple[str, ...]
    ground_truth: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "contexts", tuple(self.contexts))
        for name in ("question", "answer", "ground_truth"):
            if not getattr(self, name).strip():
                raise ValueError(f"evaluation record field '{name}' is empty")

    @property
    def context_text(self) -> str:
        return "\n\n".join(self.contexts)


@dataclass(frozen=True)
class RelevanceJudgments:
    v: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "v", tuple(int(x) for x in self.v))
        if any(x not in (0, 1) for x in self.v):
            raise ValueError("relevance flags must be 0 or 1")

    @property
    def K(self) -> int:
        return len(self.v)


@dataclass
class MetricReport:
    faithfulness: float | None = None
    answer_relevance: float | None = None
    context_precision: float | None = None
    context_recall: float | None = None
    counts: dict[str, int] = field(default_factory=dict)
    flags: dict[str, bool] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    embedding_model: str = ""

    def metrics(self) -> dict[str, float | None]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return {
            **self.metrics(),
            "counts": dict(self.counts),
            "flags": dict(self.flags),
            "warnings": list(self.warnings),
            "embedding_model": self.embedding_model,
        }


def _ask(chat: ChatProvider, system: str, user: str) -> str:
    try:
        return chat.chat(ChatRequest(system, user))
    except HybridRAGError as exc:
        raise MetricError(f"judge call failed: {exc}") from exc


_BULLET = re.compile(r"^\s*(?:[-*•]+|\d+[.)]|statement\s*\d*\s*:)\s*", re.I)


def parse_statements(raw: str) -> list[str]:
    out = []
    for line in raw.splitlines():
        line = _BULLET.sub("", line).strip()
        if line:
            out.append(line)
    return out


def parse_verdicts(raw: str, expected: int) -> list[int]:
    """Yes/No flags from the final-verdict block at the end of a judge reply."""
    marker = None
    for marker in re.finditer(r"final\s+verdicts?", raw, re.I):
        pass
    if marker is not None:
        tail = raw[marker.end():]
        tokens = re.findall(r"\b(yes|no)\b", tail, re.I)
    else:
        tokens = [ln.strip(" .,:;") for ln in raw.splitlines() if ln.strip(" .,:;").lower() in ("yes", "no")]
    flags = [1 if t.lower() == "yes" else 0 for t in tokens]
    if len(flags) != expected:
        raise MetricError(f"expected {expected} verdicts, judge returned {len(flags)}", raw)
    return flags


def parse_verdict(raw: str) -> int:
    found = re.findall(r"verdict\W*(yes|no)\b", raw, re.I)
    if found:
        return 1 if found[-1].lower() == "yes" else 0
    m = re.match(r"^\W*(yes|no)\b", raw.strip(), re.I)
    if m:
        return 1 if m.group(1).lower() == "yes" else 0
    raise MetricError("judge verdict is neither Yes nor No", raw)


def extract_statements(question: str, answer: str, chat: ChatProvider) -> list[str]:
    if not answer.strip():
        raise ValueError("answer is empty")
    raw = _ask(chat, STATEMENTS_SYSTEM, STATEMENTS_PROMPT.format(question=question, answer=answer))
    statements = parse_statements(raw)
    if not statements:
        logger.warning("judge extracted no statements from answer %r", answer[:80])
    return statements


def verify_statements(statements: Sequence[str], contexts: Sequence[str], chat: ChatProvider) -> list[int]:
    if not statements:
        raise ValueError("no statements to verify")
    block = "\n".join(f"statement: {s}" for s in statements)
    raw = _ask(chat, VERIFY_SYSTEM, VERIFY_PROMPT.format(context="\n\n".join(contexts), statements=block))
    return parse_verdicts(raw, len(statements))


def faithfulness_score(verdicts: Sequence[int]) -> float | None:
    """Supported statements over all statements; ``None`` when there are none."""
    if not verdicts:
        return None
    return sum(verdicts) / len(verdicts)


def faithfulness(record: EvalRecord, chat: ChatProvider, report: MetricReport | None = None) -> float | None:
    statements = extract_statements(record.question, record.answer, chat)
    verdicts = verify_statements(statements, record.contexts, chat) if statements else []
    if report is not None:
        report.counts["statements"] = len(statements)
        report.counts["supported"] = sum(verdicts)
        if not statements:
            report.warnings.append("no statements extracted; faithfulness undefined")
    return faithfulness_score(verdicts)


def generate_questions(answer: str, chat: ChatProvider, n: int) -> list[str]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [
        _ask(chat, QUESTION_SYSTEM.format(i=i, n=n), QUESTION_PROMPT.format(answer=answer)).strip()
        for i in range(1, n + 1)
    ]


def answer_relevance(
    record: EvalRecord,
    chat: ChatProvider,
    embedder: Embedder,
    n: int = 3,
    report: MetricReport | None = None,
) -> float:
    questions = generate_questions(record.answer, chat, n)
    try:
        vectors = embedder.embed([record.question, *questions])
    except (HybridRAGError, ValueError) as exc:
        raise MetricError(f"embedding generated questions failed: {exc}") from exc
    sims = [cosine_similarity(vectors[0], v) for v in vectors[1:]]
    if report is not None:
        report.counts["generated_questions"] = len(questions)
        report.embedding_model = getattr(embedder, "model_id", "")
    return math.fsum(sims) / len(sims)


def context_precision(judgments: RelevanceJudgments | Sequence[int]) -> tuple[float, bool]:
    """Rank-weighted precision; returns ``(score, zero_relevant)``.

    ``score = sum_k(precision@k * v_k) / sum_k(v_k)`` with
    ``precision@k = sum_{i<=k} v_i / k``. With no relevant item the score
    is 0 and the flag is set.
    """
    v = judgments.v if isinstance(judgments, RelevanceJudgments) else tuple(judgments)
    if not v:
        raise ValueError("context precision needs at least one judgement")
    # exact rational arithmetic, rounded once, so the result is platform independent
    hits = 0
    total = Fraction(0)
    for k, flag in enumerate(v, start=1):
        hits += flag
        if flag:
            total += Fraction(hits, k)
    if hits == 0:
        return 0.0, True
    return float(total / hits), False


def judge_relevance(record: EvalRecord, chat: ChatProvider) -> RelevanceJudgments:
    if not record.contexts:
        raise ValueError("no contexts to judge")
    flags = []
    for ctx in record.contexts:
        raw = _ask(chat, RELEVANCE_SYSTEM, RELEVANCE_PROMPT.format(
            question=record.question, context=ctx, ground_truth=record.ground_truth))
        flags.append(parse_verdict(raw))
    return RelevanceJudgments(tuple(flags))


_ABBREVIATIONS = frozenset({
    "ltd.", "inc.", "co.", "corp.", "plc.", "llc.", "mr.", "mrs.", "ms.", "dr.", "no.", "vs.", "e.g.", "i.e.",
    "approx.", "rs.", "q1.", "q2.", "q3.", "q4.", "fy.", "yoy.", "qoq.",
})
_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    """Split on terminal punctuation, not after common corporate abbreviations."""
    sentences, start = [], 0
    for m in _BOUNDARY.finditer(text):
        before = text[start:m.start()]
        last_word = before.split()[-1].lower() if before.split() else ""
        if last_word in _ABBREVIATIONS:
            continue
        sentences.append(before.strip())
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return [s for s in sentences if s]


def attribute_sentences(sentences: Sequence[str], contexts: Sequence[str], chat: ChatProvider) -> list[int]:
    context = "\n\n".join(contexts)
    return [
        parse_verdict(_ask(chat, ATTRIBUTION_SYSTEM, ATTRIBUTION_PROMPT.format(context=context, sentence=s)))
        for s in sentences
    ]


def context_recall(record: EvalRecord, chat: ChatProvider, report: MetricReport | None = None) -> float:
    sentences = split_sentences(record.ground_truth)
    if not sentences:
        raise ValueError("ground truth has no sentences")
    flags = attribute_sentences(sentences, record.contexts, chat)
    if report is not None:
        report.counts["gt_sentences"] = len(sentences)
        report.counts["attributed_sentences"] = sum(flags)
    return sum(flags) / len(sentences)


@dataclass
class EvalConfig:
    n_questions: int = 3
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_questions < 1:
            raise ValueError("n_questions must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def evaluate_record(record: EvalRecord, chat: ChatProvider, embedder: Embedder, config: EvalConfig | None = None) -> MetricReport:
    config = config or EvalConfig()
    report = MetricReport()
    report.faithfulness = faithfulness(record, chat, report)
    report.answer_relevance = answer_relevance(record, chat, embedder, config.n_questions, report)
    if record.contexts:
        judgments = judge_relevance(record, chat)
        report.context_precision, zero = context_precision(judgments)
        report.counts["relevant_in_topK"] = sum(judgments.v)
    else:
        report.context_precision, zero = 0.0, True
        report.counts["relevant_in_topK"] = 0
    report.counts["contexts"] = len(record.contexts)
    report.flags["zero_relevant"] = zero
    report.context_recall = context_recall(record, chat, report)
    return report


@dataclass
class BatchResult:
    reports: list[MetricReport | None]
    errors: list[str | None]
    aggregate: dict[str, float | None]
    counts: dict[str, int]


def aggregate_reports(reports: Sequence[MetricReport | None]) -> tuple[dict[str, float | None], dict[str, int]]:
    """Arithmetic mean per metric over the records where it is defined."""
    ok = [r for r in reports if r is not None]
    means: dict[str, float | None] = {}
    counts = {"records": len(reports), "evaluated": len(ok), "skipped": len(reports) - len(ok)}
    for m in METRICS:
        values = [getattr(r, m) for r in ok if getattr(r, m) is not None]
        means[m] = math.fsum(values) / len(values) if values else None
        counts[f"n_{m}"] = len(values)
    return means, counts


def evaluate_batch(
    records: Sequence[EvalRecord],
    chat: ChatProvider,
    embedder: Embedder,
    config: EvalConfig | None = None,
) -> BatchResult:
    if not records:
        raise ValueError("no records to evaluate")
    config = config or EvalConfig()

    def one(record: EvalRecord):
        try:
            return evaluate_record(record, chat, embedder, config), None
        except (HybridRAGError, ValueError) as exc:
            logger.warning("skipping record %r: %s", record.question[:60], exc)
            return None, f"{type(exc).__name__}: {exc}"

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    reports = [r for r, _ in results]
    errors = [e for _, e in results]
    aggregate, counts = aggregate_reports(reports)
    return BatchResult(reports, errors, aggregate, counts)


def format_metric(value: float | None) -> str:
    return "NA" if value is None else f"{value:.2f}"
