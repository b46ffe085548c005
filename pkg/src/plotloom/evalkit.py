"""Pairwise questionnaires, win rates and rater agreement."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from pydantic import BaseModel, field_validator

from .corpus import Excerpt, select_excerpts
from .errors import DocTooShort, InvalidCounts, LengthMismatch, SchemaViolation
from .llmio import Backend, GenerationOptions, ask_structured, load_template


class Aspect(str, enum.Enum):
    INTERESTING = "INTERESTING"
    COHERENT = "COHERENT"
    HUMANLIKE = "HUMANLIKE"
    DICT_GRAM = "DICT_GRAM"
    TRANSITION = "TRANSITION"
    FORMAT = "FORMAT"
    CONSISTENCY = "CONSISTENCY"


class Answer(str, enum.Enum):
    A = "A"
    B = "B"
    BOTH = "BOTH"
    NEITHER = "NEITHER"


ASPECT_LABELS = {
    Aspect.INTERESTING: "Interesting",
    Aspect.COHERENT: "Coherent",
    Aspect.HUMANLIKE: "Human-like",
    Aspect.DICT_GRAM: "Diction and Grammar",
    Aspect.TRANSITION: "Transition",
    Aspect.FORMAT: "Script Format Compliance",
    Aspect.CONSISTENCY: "Consistency",
}

QUESTION_BANK: dict[Aspect, tuple[str, ...]] = {
    Aspect.INTERESTING: (
        "Which screenplay excerpt better captures your interest?",
        "Which excerpt makes you more eager to see what happens next?",
    ),
    Aspect.COHERENT: (
        "In which excerpt does the plot develop more smoothly?",
        "Which excerpt has smoother transitions between scenes?",
    ),
    Aspect.HUMANLIKE: (
        "Which excerpt reads more like it was written by a human screenwriter?",
        "Which excerpt has more natural, human-sounding dialogue?",
    ),
    Aspect.DICT_GRAM: (
        "Which excerpt is more accurate in word choice and grammar?",
        "Which excerpt has fewer awkward or incorrect phrasings?",
    ),
    Aspect.TRANSITION: (
        "In which excerpt do the story and emotions shift more naturally between scenes?",
        "Which excerpt handles changes of mood more convincingly?",
    ),
    Aspect.FORMAT: (
        "Which excerpt better follows screenplay formatting rules?",
        "Which excerpt uses scene headings, character cues and dialogue more correctly?",
    ),
    Aspect.CONSISTENCY: (
        "Which excerpt is more consistent with the plot of the original novel excerpt?",
        "Which excerpt better preserves the characters of the original novel excerpt?",
    ),
}

DEFAULT_QUESTION_COUNTS: dict[Aspect, int] = {
    Aspect.INTERESTING: 2,
    Aspect.COHERENT: 2,
    Aspect.HUMANLIKE: 1,
    Aspect.DICT_GRAM: 1,
    Aspect.TRANSITION: 1,
    Aspect.FORMAT: 1,
    Aspect.CONSISTENCY: 2,
}

CONTROL_ID = "control"


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    aspect: Aspect | None = None   # None for the control question


@dataclass(frozen=True)
class Questionnaire:
    id: str
    novel_excerpt: Excerpt
    item_a: Excerpt
    item_b: Excerpt
    questions: tuple[Question, ...]
    seed: int
    # hidden: which source sits behind A and B, plus the control answer
    source_a: str = field(repr=False, default="")
    source_b: str = field(repr=False, default="")
    control_answer: Answer = field(repr=False, default=Answer.BOTH)

    def public_dict(self) -> dict:
        """Everything a rater (or a judge model) may see."""
        return {
            "id": self.id,
            "novel_excerpt": self.novel_excerpt.text,
            "A": self.item_a.text,
            "B": self.item_b.text,
            "questions": [{"id": q.id, "text": q.text} for q in self.questions],
        }

    def key_dict(self) -> dict:
        return {"A": self.source_a, "B": self.source_b, "control": self.control_answer.value}

    def to_markdown(self) -> str:
        out = [
            f"# Questionnaire {self.id}",
            "",
            "## Original novel excerpt",
            "",
            self.novel_excerpt.text,
            "",
            "## Screenplay excerpt A",
            "",
            "```",
            self.item_a.text,
            "```",
            "",
            "## Screenplay excerpt B",
            "",
            "```",
            self.item_b.text,
            "```",
            "",
            "## Questions",
            "",
            "Answer each with A, B, BOTH (both are good) or NEITHER (neither is good).",
            "",
        ]
        for q in self.questions:
            out.append(f"- **{q.id}**: {q.text}")
        return "\n".join(out) + "\n"


@dataclass(frozen=True)
class ResponseSet:
    questionnaire_id: str
    rater_id: str
    answers: dict[str, Answer]
    control_passed: bool | None = None


@dataclass(frozen=True)
class AspectCounts:
    n_a: int
    n_b: int
    n_both: int
    n_neither: int
    n_raters: int
    questions: int

    def validate(self) -> None:
        values = (self.n_a, self.n_b, self.n_both, self.n_neither, self.n_raters, self.questions)
        if min(values) < 0:
            raise InvalidCounts(f"negative count in {self}")
        if self.questions < 1 or self.n_raters < 1:
            raise InvalidCounts("need at least one rater and one question")
        total = self.n_a + self.n_b + self.n_both + self.n_neither
        if total != self.n_raters * self.questions:
            raise InvalidCounts(
                f"answers sum to {total}, expected raters x questions = {self.n_raters * self.questions}"
            )


# -- questionnaires ----------------------------------------------------------


def build_questions(aspects: Mapping[Aspect, int], control: Answer) -> tuple[Question, ...]:
    qs = []
    for aspect, count in aspects.items():
        if not 1 <= count <= len(QUESTION_BANK[aspect]):
            raise ValueError(f"{aspect.value}: question count must be 1..{len(QUESTION_BANK[aspect])}")
        for k in range(count):
            qs.append(Question(f"{aspect.value.lower()}_{k + 1}", QUESTION_BANK[aspect][k], aspect))
    wording = {
        Answer.A: "Attention check: please answer A for this question.",
        Answer.B: "Attention check: please answer B for this question.",
        Answer.BOTH: "Attention check: please answer that both are good for this question.",
        Answer.NEITHER: "Attention check: please answer that neither is good for this question.",
    }
    qs.append(Question(CONTROL_ID, wording[control]))
    return tuple(qs)


def build_questionnaires(
    novel: str,
    doc1: str,
    doc2: str,
    n: int,
    seed: int,
    aspects: Mapping[Aspect, int] | None = None,
    labels: tuple[str, str] = ("doc1", "doc2"),
    target_tokens: int = 1000,
) -> list[Questionnaire]:
    """Pair excerpts from two screenplays with novel excerpts, A/B order by seeded coin.

    Excerpt ``k`` of each source is paired with excerpt ``k`` of the others,
    so pairs line up by position. A source yielding fewer than ``n``
    excerpts is cycled and the :class:`DocTooShort` warning passes through.
    """
    if not novel.strip() or not doc1.strip() or not doc2.strip():
        raise ValueError("documents must be non-empty")
    aspects = dict(DEFAULT_QUESTION_COUNTS if aspects is None else aspects)
    rng = random.Random(seed)
    s_novel, s1, s2 = (rng.randrange(2**31) for _ in range(3))
    novel_ex = select_excerpts(novel, n, s_novel, target_tokens, source_id="novel")
    ex1 = select_excerpts(doc1, n, s1, target_tokens, source_id="screenplay")
    ex2 = select_excerpts(doc2, n, s2, target_tokens, source_id="screenplay")
    options = list(Answer)
    out = []
    for k in range(n):
        qid = f"q{k:03d}"
        doc1_is_a = rng.random() < 0.5
        control = rng.choice(options)
        e1, e2 = ex1[k % len(ex1)], ex2[k % len(ex2)]
        # blinded source ids so serialized excerpts never carry the labels
        a, b = (e1, e2) if doc1_is_a else (e2, e1)
        a = Excerpt(f"{qid}-A", a.start_offset, a.text, a.token_estimate)
        b = Excerpt(f"{qid}-B", b.start_offset, b.text, b.token_estimate)
        out.append(Questionnaire(
            id=qid,
            novel_excerpt=novel_ex[k % len(novel_ex)],
            item_a=a,
            item_b=b,
            questions=build_questions(aspects, control),
            seed=seed,
            source_a=labels[0] if doc1_is_a else labels[1],
            source_b=labels[1] if doc1_is_a else labels[0],
            control_answer=control,
        ))
    return out


def answer_key(questionnaires: Sequence[Questionnaire], aspects: Mapping[Aspect, int] | None = None) -> dict:
    aspects = dict(DEFAULT_QUESTION_COUNTS if aspects is None else aspects)
    return {
        "aspects": {a.value: q for a, q in aspects.items()},
        "questionnaires": {q.id: q.key_dict() for q in questionnaires},
    }


def write_questionnaires(questionnaires: Sequence[Questionnaire], out_dir: str | Path,
                         aspects: Mapping[Aspect, int] | None = None) -> None:
    """Write the rater-facing JSON and Markdown, and the sealed answer key."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    public = [q.public_dict() for q in questionnaires]
    (out / "questionnaires.json").write_text(json.dumps(public, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    (out / "questionnaires.md").write_text("\n".join(q.to_markdown() for q in questionnaires), encoding="utf-8")
    (out / "answer_key.json").write_text(
        json.dumps(answer_key(questionnaires, aspects), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# -- responses ---------------------------------------------------------------


def write_responses(responses: Iterable[ResponseSet], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["questionnaire_id", "rater_id", "question_id", "answer"])
        for r in responses:
            for qid, ans in r.answers.items():
                w.writerow([r.questionnaire_id, r.rater_id, qid, ans.value])


def read_responses(path: str | Path) -> list[ResponseSet]:
    grouped: dict[tuple[str, str], dict[str, Answer]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["questionnaire_id"], row["rater_id"])
            grouped.setdefault(key, {})[row["question_id"]] = Answer(row["answer"].strip().upper())
    return [ResponseSet(q, r, answers) for (q, r), answers in grouped.items()]


def aggregate_counts(
    responses: Iterable[ResponseSet],
    key: Mapping,
    focus: str,
) -> dict[Aspect, AspectCounts]:
    """Count answers per aspect from the point of view of source ``focus``.

    Answers are unblinded through the key, so ``n_a`` counts preferences for
    ``focus`` and ``n_b`` for the other source. Response sets that fail the
    control question are excluded; ``n_raters`` is the number of included
    (rater, questionnaire) response sets.
    """
    aspects = {Aspect(a): int(q) for a, q in key["aspects"].items()}
    qkey = key["questionnaires"]
    tallies = {a: [0, 0, 0, 0] for a in aspects}
    n = 0
    for r in responses:
        entry = qkey[r.questionnaire_id]
        if r.answers.get(CONTROL_ID) != Answer(entry["control"]):
            continue
        if focus not in (entry["A"], entry["B"]):
            raise ValueError(f"source {focus!r} not in questionnaire {r.questionnaire_id}")
        focus_is_a = entry["A"] == focus
        n += 1
        for aspect, count in aspects.items():
            for k in range(count):
                ans = r.answers.get(f"{aspect.value.lower()}_{k + 1}")
                if ans is None:
                    qid = f"{aspect.value.lower()}_{k + 1}"
                    raise InvalidCounts(f"{r.rater_id} left {qid} unanswered in {r.questionnaire_id}")
                t = tallies[aspect]
                if ans is Answer.BOTH:
                    t[2] += 1
                elif ans is Answer.NEITHER:
                    t[3] += 1
                elif (ans is Answer.A) == focus_is_a:
                    t[0] += 1
                else:
                    t[1] += 1
    return {a: AspectCounts(*tallies[a], n_raters=n, questions=aspects[a]) for a in aspects}


def aspect_win_rate(c: AspectCounts, x: str = "A") -> Fraction:
    """(preferences for X + both-good answers) / (raters x questions)."""
    c.validate()
    if x == "A":
        wins = c.n_a
    elif x == "B":
        wins = c.n_b
    else:
        raise ValueError("x must be 'A' or 'B'")
    return Fraction(wins + c.n_both, c.n_raters * c.questions)


OVERALL = "OVERALL"


def win_rate(counts: Mapping[Aspect, AspectCounts] | AspectCounts, x: str = "A") -> dict[str, Fraction]:
    """Per-aspect win rates plus their unweighted mean under ``OVERALL``."""
    if isinstance(counts, AspectCounts):
        counts = {Aspect.INTERESTING: counts}
    rates = {a.value if isinstance(a, Aspect) else str(a): aspect_win_rate(c, x) for a, c in counts.items()}
    rates[OVERALL] = sum(rates.values(), Fraction(0)) / len(rates)
    return rates


def win_rate_table(counts: Mapping[Aspect, AspectCounts], focus: str, other: str) -> tuple[str, str]:
    """CSV and Markdown renderings of both sides' win rates."""
    wr_a, wr_b = win_rate(counts, "A"), win_rate(counts, "B")
    cols = list(wr_a)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source"] + cols)
    w.writerow([focus] + [f"{float(wr_a[c]):.4f}" for c in cols])
    w.writerow([other] + [f"{float(wr_b[c]):.4f}" for c in cols])
    header = ["Source"] + [ASPECT_LABELS[Aspect(c)] if c != OVERALL else "Overall" for c in cols]
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for name, rates in ((focus, wr_a), (other, wr_b)):
        md.append("| " + " | ".join([name] + [f"{100 * float(rates[c]):.1f}%" for c in cols]) + " |")
    return buf.getvalue(), "\n".join(md) + "\n"


# -- agreement ---------------------------------------------------------------


def cohens_kappa(r1: Sequence, r2: Sequence) -> float:
    """Cohen's kappa between two raters' categorical answers.

    Returns 1.0 when expected agreement is 1 (both raters used one category).
    """
    if len(r1) != len(r2):
        raise LengthMismatch(f"answer vectors differ in length: {len(r1)} vs {len(r2)}")
    if not r1:
        raise ValueError("need at least one answer")
    n = len(r1)
    p_o = Fraction(sum(1 for a, b in zip(r1, r2) if a == b), n)
    cats = set(r1) | set(r2)
    p_e = sum((Fraction(list(r1).count(c), n) * Fraction(list(r2).count(c), n) for c in cats), Fraction(0))
    if p_e == 1:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def kappa_matrix(responses: Iterable[ResponseSet]) -> tuple[list[str], list[list[float | None]]]:
    """Mean per-questionnaire kappa for every pair of raters (control question excluded)."""
    by_rater: dict[str, dict[str, dict[str, Answer]]] = {}
    for r in responses:
        by_rater.setdefault(r.rater_id, {})[r.questionnaire_id] = r.answers
    raters = sorted(by_rater)
    mat: list[list[float | None]] = [[None] * len(raters) for _ in raters]
    for i, j in itertools.product(range(len(raters)), repeat=2):
        if i == j:
            mat[i][j] = 1.0
            continue
        a, b = by_rater[raters[i]], by_rater[raters[j]]
        vals = []
        for qid in sorted(a.keys() & b.keys()):
            qs = sorted((a[qid].keys() & b[qid].keys()) - {CONTROL_ID})
            if qs:
                vals.append(cohens_kappa([a[qid][q] for q in qs], [b[qid][q] for q in qs]))
        mat[i][j] = sum(vals) / len(vals) if vals else None
    return raters, mat


def kappa_csv(raters: list[str], mat: list[list[float | None]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rater"] + raters)
    for name, row in zip(raters, mat):
        w.writerow([name] + ["" if v is None else f"{v:.4f}" for v in row])
    return buf.getvalue()


# -- LLM judge ---------------------------------------------------------------


class _JudgePayload(BaseModel):
    answers: dict[str, Answer]

    @field_validator("answers", mode="before")
    @classmethod
    def _normalize(cls, v):
        if isinstance(v, dict):
            return {k: (a.strip().upper() if isinstance(a, str) else a) for k, a in v.items()}
        return v


def render_for_judge(q: Questionnaire) -> str:
    return q.to_markdown()


def judge_with_llm(
    q: Questionnaire,
    backend: Backend,
    rater_id: str = "llm-judge",
    opts: GenerationOptions = GenerationOptions(),
) -> ResponseSet:
    """Ask a model to fill in one questionnaire. The model never sees the key."""
    expected = {qq.id for qq in q.questions}

    def check(p: _JudgePayload) -> None:
        missing = sorted(expected - p.answers.keys())
        if missing:
            raise SchemaViolation(missing[0], "question left unanswered")

    req = load_template("judge").request(
        f"judge:{q.id}", temperature=opts.temperature, max_tokens=opts.max_tokens,
        questionnaire=render_for_judge(q),
    )
    payload = ask_structured(backend, req, _JudgePayload, check).value
    answers = {qq.id: payload.answers[qq.id] for qq in q.questions}
    return ResponseSet(q.id, rater_id, answers, answers.get(CONTROL_ID) == q.control_answer)


def judge_all(
    questionnaires: Sequence[Questionnaire],
    backend: Backend,
    parallel: int = 1,
    rater_id: str = "llm-judge",
    opts: GenerationOptions = GenerationOptions(),
) -> list[ResponseSet]:
    if parallel <= 1:
        return [judge_with_llm(q, backend, rater_id, opts) for q in questionnaires]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(lambda q: judge_with_llm(q, backend, rater_id, opts), questionnaires))


def questionnaires_from_files(public_path: str | Path, key_path: str | Path) -> list[Questionnaire]:
    """Rebuild questionnaires from the rater-facing JSON plus the answer key."""
    public = json.loads(Path(public_path).read_text(encoding="utf-8"))
    key = json.loads(Path(key_path).read_text(encoding="utf-8"))
    out = []
    for p in public:
        k = key["questionnaires"][p["id"]]
        questions = []
        for qq in p["questions"]:
            aspect = None
            if qq["id"] != CONTROL_ID:
                aspect = Aspect(qq["id"].rsplit("_", 1)[0].upper())
            questions.append(Question(qq["id"], qq["text"], aspect))
        out.append(Questionnaire(
            id=p["id"],
            novel_excerpt=Excerpt("novel", 0, p["novel_excerpt"], 0),
            item_a=Excerpt(f"{p['id']}-A", 0, p["A"], 0),
            item_b=Excerpt(f"{p['id']}-B", 0, p["B"], 0),
            questions=tuple(questions),
            seed=0,
            source_a=k["A"],
            source_b=k["B"],
            control_answer=Answer(k["control"]),
        ))
    return out


__all__ = [
    "Answer", "Aspect", "AspectCounts", "DocTooShort", "Question", "Questionnaire", "ResponseSet",
    "aggregate_counts", "answer_key", "aspect_win_rate", "build_questionnaires", "cohens_kappa",
    "judge_all", "judge_with_llm", "kappa_matrix", "win_rate",
]
