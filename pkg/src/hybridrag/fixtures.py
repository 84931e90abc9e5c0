"""Synthetic desk-scale corpus and a rule-based stand-in for the LLM.

``synthetic_corpus`` writes ten fictional earnings call transcripts (five
companies, two quarters), a manifest and twenty question / ground-truth
pairs. ``SyntheticResponder`` answers every prompt the engine issues with
simple deterministic rules; wrapping it in ``RecordingChat`` while the
pipelines run produces the scripted fixture file that tests replay.
"""

from __future__ import annotations

import csv
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path

from hybridrag import evalsuite, kg, pipelines
from hybridrag.providers import ChatRequest
from hybridrag.templates import CANNOT_ANSWER


@dataclass(frozen=True)
class Company:
    name: str
    ceo: str
    products: tuple[str, str]
    locations: tuple[str, str]
    targets: tuple[str, str]
    partners: tuple[str, str]
    regulation: str


COMPANIES = (
    Company("Aurora Textiles", "Meera Kapoor", ("EcoWeave fabric", "ThermaKnit yarn"), ("Vietnam", "Portugal"),
            ("Sunloom Mills", "Riverbend Dyes"), ("Northwind Retail", "Calico Stores"), "Textile Export Authority audit"),
    Company("Bluefin Logistics", "Arjun Rao", ("FleetSense tracking", "Harbor Link service"), ("Kenya", "Chile"),
            ("Swiftport Freight", "Coastal Cold Chain"), ("Metro Rail Cargo", "Skyline Airfreight"), "Port Safety Board inquiry"),
    Company("Cedar Pharma", "Lena Fischer", ("Cardiolex tablets", "Respira inhaler"), ("Brazil", "Poland"),
            ("Medigen Labs", "Pinecrest Biologics"), ("Helix Diagnostics", "Apex Hospitals"), "Drug Pricing Council review"),
    Company("Deltaline Power", "Samuel Okafor", ("GridFlex storage", "SolarPeak panels"), ("Morocco", "Indonesia"),
            ("Windcrest Energy", "Terravolt Cables"), ("Urban Transit Agency", "Greenfield Utilities"), "Electricity Regulator hearing"),
    Company("Evergreen Foods", "Priya Menon", ("NutriCrunch cereal", "DairyFresh yogurt"), ("Egypt", "Mexico"),
            ("Golden Harvest Mills", "Orchard Valley Juices"), ("FreshMart Supermarkets", "QuickBite Cafes"), "Food Safety Agency recall"),
)
QUARTERS = (("Q1", "FY2024"), ("Q2", "FY2024"))

FILLER = (
    "Management said demand conditions stayed resilient despite softer discretionary spending.",
    "The team expects the pricing environment to remain competitive over the next few quarters.",
    "Working capital discipline remained a priority and inventory days improved.",
    "Attrition moderated and hiring was calibrated to the demand outlook.",
    "Management described a cautious but constructive view of the macroeconomic environment.",
    "Input cost inflation eased, which supported gross margins during the period.",
    "The order pipeline remained healthy across most customer segments.",
    "Capital allocation will continue to favour organic investment over share buybacks.",
    "Digital initiatives improved productivity and shortened delivery cycles.",
    "The board remains confident about long-term structural growth drivers.",
    "Analysts asked about seasonality, and management noted that the second half is usually stronger.",
    "Operator: The next question comes from an analyst at a domestic brokerage.",
    "Thank you, and good evening to everyone joining the call.",
    "Cash conversion stayed strong and net debt declined further.",
)

# entity-free questions answered by a filler sentence
THEMES = (
    ("What did management say about demand conditions?", FILLER[0]),
    ("How did working capital and inventory days develop?", FILLER[2]),
    ("What happened to input cost inflation and gross margins?", FILLER[5]),
    ("What is the stance on capital allocation?", FILLER[7]),
)


def _facts(c: Company, qi: int, rng: random.Random) -> list[tuple[str, str, str, str, str, str]]:
    """(sentence, head, head_type, relation, object, object_type) for one transcript."""
    growth = rng.randint(4, 19)
    margin = rng.randint(11, 29)
    guide = rng.randint(5, 15)
    items = [
        (f"{c.name} reported {growth} percent revenue growth.", c.name, "Company", "reported",
         f"{growth} percent revenue growth", "Financial Metric"),
        (f"{c.name} reported {margin} percent EBITDA margin.", c.name, "Company", "reported",
         f"{margin} percent EBITDA margin", "Financial Metric"),
        (f"{c.ceo} leads {c.name} as chief executive officer.", c.ceo, "Executive", "leads", c.name, "Company"),
        (f"{c.name} launched {c.products[qi]}.", c.name, "Company", "launched", c.products[qi], "Product"),
        (f"{c.name} expanded in {c.locations[qi]}.", c.name, "Company", "expanded in", c.locations[qi], "Location"),
        (f"{c.name} acquired {c.targets[qi]}.", c.name, "Company", "acquired", c.targets[qi], "Company"),
        (f"{c.name} partnered with {c.partners[qi]}.", c.name, "Company", "partnered with", c.partners[qi], "Company"),
        (f"{c.name} guided {guide} percent annual growth.", c.name, "Company", "guided",
         f"{guide} percent annual growth", "Financial Metric"),
    ]
    if qi == 1:
        items.append((f"{c.name} faces {c.regulation}.", c.name, "Company", "faces", c.regulation, "Regulation"))
    return items


def _transcript(c: Company, quarter: str, year: str, facts, rng: random.Random) -> str:
    sentences = [f[0] for f in facts]
    pool = list(FILLER)
    rng.shuffle(pool)
    body = sentences + pool + rng.sample(FILLER, 6)
    rng.shuffle(body)
    paragraphs, i = [], 0
    while i < len(body):
        n = rng.randint(2, 5)
        paragraphs.append(" ".join(body[i:i + n]))
        i += n
    # pad so that documents split into several chunks
    lines = [f"{c.name} {quarter} {year} Earnings Call Transcript", ""]
    for p in paragraphs:
        lines.append(p)
        lines.append("")
    text = "\n".join(lines)
    extra = []
    while len(text) + sum(len(x) + 2 for x in extra) < 4200:
        extra.append(" ".join(rng.sample(FILLER, 4)))
    return text + "\n\n".join(extra) + "\n"


def synthetic_corpus(out_dir: str | Path, seed: int = 2024) -> dict:
    """Write transcripts, manifest and ground truth under ``out_dir``."""
    out = Path(out_dir)
    corpus = out / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    manifest, rows = [], []
    for ci, c in enumerate(COMPANIES):
        for qi, (quarter, year) in enumerate(QUARTERS):
            facts = _facts(c, qi, rng)
            doc_id = f"{c.name.split()[0].upper()}-{quarter}-{year}"
            fname = f"{doc_id.lower()}.txt"
            (corpus / fname).write_text(_transcript(c, quarter, year, facts, rng), encoding="utf-8")
            manifest.append({"file": fname, "doc_id": doc_id, "company": c.name, "quarter": quarter, "fiscal_year": year})
            meta = {"company": c.name, "quarter": quarter, "fiscal_year": year}
            k = 2 * ci + qi
            if k % 2 == 0:
                rows.append({"question": f"What revenue growth did {c.name} report in {quarter} {year}?",
                             "ground_truth": facts[0][0], **meta})
                question, truth = THEMES[(k // 2) % len(THEMES)]
                rows.append({"question": question, "ground_truth": truth, **meta})
            else:
                rows.append({"question": f"Which product did {c.name} launch in {quarter} {year}?",
                             "ground_truth": facts[3][0], **meta})
                if k % 4 == 1:
                    rows.append({"question": f"Who leads {c.name} as chief executive officer?",
                                 "ground_truth": facts[2][0], **meta})
                else:
                    rows.append({"question": f"Which company did {c.name} acquire in {quarter} {year}?",
                                 "ground_truth": facts[5][0], **meta})
    (corpus / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["question", "ground_truth", "company", "quarter", "fiscal_year"])
        writer.writeheader()
        writer.writerows(rows)
    return {"documents": len(manifest), "questions": len(rows)}


CONFIG_TOML = """\
# Synthetic fixture configuration: offline hash embedder and scripted chat replay.
[corpus]
root = "corpus"
manifest = "corpus/manifest.json"
ground_truth = "ground_truth.csv"

[chunking]
vector_size = 1024
vector_overlap = 0
kg_size = 2024
kg_overlap = 204

[retrieval]
k_candidates = 20
k_context = 4
dfs_depth = 1

[generation]
temperature = 0.0
max_output_tokens = 1024

[evaluation]
n_ar_questions = 3

[embedding]
kind = "hash"
dim = 64

[chat]
kind = "scripted"
fixtures = "chat_fixtures.json"

[paths]
work_dir = "work"
runs_dir = "runs"
"""

STOPWORDS = frozenset(
    "a an the of in on at to for and or by with as is are was were be did do does what which who whom how "
    "why when where this that these those it its from about their there has have had report reported".split()
)
_WORD = re.compile(r"[a-z0-9]+")


def _stem(word: str) -> str:
    for suffix in ("ing", "ed", "es", "e", "s"):
        if len(word) > len(suffix) + 3 and word.endswith(suffix):
            return word[: -len(suffix)]
    return word


def content_tokens(text: str) -> set[str]:
    return {_stem(w) for w in _WORD.findall(text.lower()) if w not in STOPWORDS}


def coverage(part: str, whole: str) -> float:
    tokens = content_tokens(part)
    if not tokens:
        return 0.0
    return len(tokens & content_tokens(whole)) / len(tokens)


def _between(text: str, start: str, end: str | None = None) -> str:
    i = text.find(start)
    if i == -1:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return text[i:j] if j != -1 else text[i:]


_GRAPH_LINE = re.compile(r"^(.*?) —(.*?)→ (.*)$")
_CONTEXT_PREFIX = re.compile(r"^\[(?:vector|graph):\d+\] ")
_HEADER = re.compile(r"Earnings Call Transcript$")


class SyntheticResponder:
    """Deterministic rule-based replies to every prompt the engine issues."""

    def __init__(self) -> None:
        self._facts = self._fact_patterns()

    @staticmethod
    def _fact_patterns():
        def alt(values):
            return "|".join(re.escape(v) for v in sorted(values, key=len, reverse=True))

        names = alt(c.name for c in COMPANIES)
        ceos = alt(c.ceo for c in COMPANIES)
        products = alt(p for c in COMPANIES for p in c.products)
        places = alt(p for c in COMPANIES for p in c.locations)
        targets = alt(t for c in COMPANIES for t in c.targets)
        partners = alt(p for c in COMPANIES for p in c.partners)
        regs = alt(c.regulation for c in COMPANIES)
        return [
            (re.compile(rf"({names}) (reported) (\d+ percent revenue growth)\."), "Company", "Financial Metric"),
            (re.compile(rf"({names}) (reported) (\d+ percent EBITDA margin)\."), "Company", "Financial Metric"),
            (re.compile(rf"({ceos}) (leads) ({names}) as chief executive officer\."), "Executive", "Company"),
            (re.compile(rf"({names}) (launched) ({products})\."), "Company", "Product"),
            (re.compile(rf"({names}) (expanded in) ({places})\."), "Company", "Location"),
            (re.compile(rf"({names}) (acquired) ({targets})\."), "Company", "Company"),
            (re.compile(rf"({names}) (partnered with) ({partners})\."), "Company", "Company"),
            (re.compile(rf"({names}) (guided) (\d+ percent annual growth)\."), "Company", "Financial Metric"),
            (re.compile(rf"({names}) (faces) ({regs})\."), "Company", "Regulation"),
        ]

    def chat(self, req: ChatRequest) -> str:
        system, user = req.system_prompt, req.user_prompt
        if system == kg.REFINE_SYSTEM:
            return " ".join(_between(user, "PASSAGE:\n").split())
        if system == kg.EXTRACT_SYSTEM:
            return self._extract(_between(user, "PASSAGE:\n"))
        if system == pipelines.ANSWER_SYSTEM:
            return self._answer(_between(user, "CONTEXT:\n", "\n\nQUESTION:\n"), _between(user, "QUESTION:\n").strip())
        if system == evalsuite.STATEMENTS_SYSTEM:
            answer = _between(user, "\nanswer: ", "\n\nWrite one statement")
            return "\n".join(evalsuite.split_sentences(answer))
        if system == evalsuite.VERIFY_SYSTEM:
            return self._verify(user)
        if system.startswith(evalsuite.QUESTION_SYSTEM.split("{")[0]):
            i = int(re.search(r"candidate (\d+) of", system).group(1))
            return self._question(_between(user, "answer: "), i)
        if system == evalsuite.RELEVANCE_SYSTEM:
            ctx = _between(user, "\ncontext: ", "\nground truth answer: ")
            gt = _between(user, "\nground truth answer: ", "\n\nWas this context")
            return "Verdict: Yes" if coverage(gt, ctx) >= 0.5 else "Verdict: No"
        if system == evalsuite.ATTRIBUTION_SYSTEM:
            ctx = _between(user, "context: ", "\n\nsentence: ")
            sentence = _between(user, "\n\nsentence: ", "\n\nCan this sentence")
            return "Verdict: Yes" if coverage(sentence, ctx) >= 0.6 else "Verdict: No"
        raise ValueError(f"synthetic responder has no rule for system prompt {system[:60]!r}")

    def _extract(self, passage: str) -> str:
        found = []
        for pattern, head_type, obj_type in self._facts:
            for m in pattern.finditer(passage):
                found.append((m.start(), [m.group(1), head_type, m.group(2), m.group(3), obj_type, "earnings call transcript"]))
        found.sort(key=lambda f: f[0])
        return json.dumps([t for _, t in found])

    def _answer(self, context: str, question: str) -> str:
        q = content_tokens(question)
        best, best_score = None, 1
        for block in context.split(pipelines.CONTEXT_DELIMITER):
            block = _CONTEXT_PREFIX.sub("", block.strip())
            g = _GRAPH_LINE.match(block)
            if g:
                candidates = [f"{g.group(1)} {g.group(2)} {g.group(3)}."]
            else:
                candidates = [s for line in block.splitlines() for s in evalsuite.split_sentences(line)]
            for sentence in candidates:
                if _HEADER.search(sentence.strip()):
                    continue
                score = len(content_tokens(sentence) & q)
                if score > best_score:
                    best, best_score = sentence, score
        return best if best else CANNOT_ANSWER

    def _verify(self, user: str) -> str:
        ctx = _between(user, "context: ", "\n\nstatement: ")
        statements = [ln[len("statement: "):] for ln in user.splitlines() if ln.startswith("statement: ")]
        lines, verdicts = [], []
        for s in statements:
            ok = coverage(s, ctx) >= 0.7
            lines.append(f"{s} -> {'supported by' if ok else 'not found in'} the context.")
            verdicts.append("Yes" if ok else "No")
        return "\n".join(lines) + "\nFinal verdict: " + ", ".join(verdicts)

    @staticmethod
    def _question(answer: str, i: int) -> str:
        words = answer.strip().rstrip(".!?").split()
        if len(words) > 2:
            del words[i % len(words)]
        return "What about " + " ".join(words) + "?"


def write_fixture_config(out_dir: str | Path) -> Path:
    path = Path(out_dir) / "config.toml"
    path.write_text(CONFIG_TOML, encoding="utf-8")
    return path
