"""Novel ingestion: chapter splitting, token estimates, sliding windows and excerpts."""

from __future__ import annotations

import math
import random
import re
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import BudgetTooSmall, DocTooShort, EmptyInput

if TYPE_CHECKING:
    from .plotgraph import PlotEvent

DEFAULT_CHARS_PER_TOKEN = 4.0

_NUMBER_WORDS = (
    "one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve|thirteen|fourteen|"
    "fifteen|sixteen|seventeen|eighteen|nineteen|twenty|thirty|forty|fifty"
)

# Ordered; the first pattern matching at least two lines is used.
DEFAULT_HEADING_PATTERNS: tuple[str, ...] = (
    rf"^(?:Chapter|CHAPTER)[ \t]+(?:\d+|[IVXLCDM]+|(?i:{_NUMBER_WORDS})(?:[- ](?i:{_NUMBER_WORDS}))?)\b[^\n]*$",
    r"^#{1,2}[ \t]+\S[^\n]*$",
    r"^[ \t]*[IVXLCDM]+\.?[ \t]*$",
)


@dataclass(frozen=True)
class Chapter:
    index: int
    heading: str
    body: str
    token_estimate: int
    # exact slice of the normalized source; joining every chapter's raw text
    # gives back the whole input
    raw: str = field(default="", repr=False, compare=False)

    @property
    def text(self) -> str:
        return f"{self.heading}\n\n{self.body}" if self.heading else self.body

    def to_dict(self) -> dict:
        return {"index": self.index, "heading": self.heading, "body": self.body,
                "token_estimate": self.token_estimate, "raw": self.raw}

    @classmethod
    def from_dict(cls, d: dict, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> "Chapter":
        body = d["body"]
        heading = d.get("heading", "")
        return cls(
            index=int(d["index"]),
            heading=heading,
            body=body,
            token_estimate=estimate_tokens(body, chars_per_token),
            raw=d.get("raw") or (f"{heading}\n{body}" if heading else body),
        )


@dataclass(frozen=True)
class Novel:
    title: str
    chapters: tuple[Chapter, ...]
    source_path: str = ""

    def __post_init__(self) -> None:
        if not self.chapters:
            raise EmptyInput("a novel needs at least one chapter")
        for i, ch in enumerate(self.chapters):
            if ch.index != i:
                raise ValueError(f"chapter indices must be contiguous from 0, got {ch.index} at position {i}")

    @property
    def text(self) -> str:
        return "".join(ch.raw for ch in self.chapters)

    def to_dict(self) -> dict:
        return {"title": self.title, "source_path": self.source_path,
                "chapters": [c.to_dict() for c in self.chapters]}

    @classmethod
    def from_dict(cls, d: dict, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> "Novel":
        chapters = tuple(Chapter.from_dict(c, chars_per_token) for c in d["chapters"])
        return cls(title=d.get("title", ""), chapters=chapters, source_path=d.get("source_path", ""))


@dataclass(frozen=True)
class WindowConfig:
    lookahead_chapters: int = 1
    context_token_budget: int = 8192
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN

    def __post_init__(self) -> None:
        if self.lookahead_chapters < 0:
            raise ValueError("lookahead_chapters must be non-negative")
        if self.context_token_budget < 256:
            raise ValueError("context_token_budget must be at least 256")
        if self.chars_per_token <= 0:
            raise ValueError("chars_per_token must be positive")


@dataclass(frozen=True)
class Window:
    focus_chapter: int
    prior_events_digest: str
    lookahead_text: str
    focus_text: str
    token_estimate: int = 0


@dataclass(frozen=True)
class Excerpt:
    source_id: str
    start_offset: int
    text: str
    token_estimate: int

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "start_offset": self.start_offset,
                "text": self.text, "token_estimate": self.token_estimate}

    @classmethod
    def from_dict(cls, d: dict) -> "Excerpt":
        return cls(d["source_id"], int(d["start_offset"]), d["text"], int(d["token_estimate"]))


def _ratio(chars_per_token: float) -> Fraction:
    # str() round-trip keeps 3.3 as 33/10 instead of its binary approximation
    return Fraction(str(chars_per_token)) if isinstance(chars_per_token, float) else Fraction(chars_per_token)


def estimate_tokens(text: str, chars_per_token: float = DEFAULT_CHARS_PER_TOKEN) -> int:
    """Character-count token estimate, ``ceil(len(text) / chars_per_token)``."""
    if chars_per_token <= 0:
        raise ValueError("chars_per_token must be positive")
    return math.ceil(len(text) / _ratio(chars_per_token))


def _max_chars(tokens: int, chars_per_token: float) -> int:
    return max(0, math.floor(tokens * _ratio(chars_per_token)))


def normalize_newlines(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def split_chapters(
    raw: str,
    patterns: Sequence[str] = DEFAULT_HEADING_PATTERNS,
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN,
) -> list[Chapter]:
    """Split a novel into chapters on heading lines.

    The first pattern that matches at least two lines decides the split. Text
    before the first heading becomes an untitled chapter when it holds
    anything but whitespace. Headings followed by an empty body (a table of
    contents, say) are folded into the next chapter's raw text so that every
    chapter has a body and nothing is lost.
    """
    if not raw or not raw.strip():
        raise EmptyInput("novel text is empty")
    text = normalize_newlines(raw)

    matches: list[re.Match] = []
    for pat in patterns:
        found = list(re.finditer(pat, text, flags=re.MULTILINE))
        if len(found) >= 2:
            matches = found
            break

    # (heading, body, raw) segments
    segments: list[tuple[str, str, str]] = []
    if not matches:
        segments.append(("", text.strip(), text))
    else:
        first = matches[0].start()
        preamble = text[:first]
        for i, m in enumerate(matches):
            end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
            seg_raw = text[m.start():end]
            segments.append((m.group(0).strip(), text[m.end():end].strip(), seg_raw))
        if preamble.strip():
            segments.insert(0, ("", preamble.strip(), preamble))
        else:
            h, b, r = segments[0]
            segments[0] = (h, b, preamble + r)

    merged: list[tuple[str, str, str]] = []
    carry = ""
    for heading, body, seg_raw in segments:
        if not body:
            carry += seg_raw
            continue
        merged.append((heading, body, carry + seg_raw))
        carry = ""
    if carry:
        if merged:
            h, b, r = merged[-1]
            merged[-1] = (h, b, r + carry)
        else:
            merged.append(("", text.strip(), text))

    return [
        Chapter(index=i, heading=h, body=b, token_estimate=estimate_tokens(b, chars_per_token), raw=r)
        for i, (h, b, r) in enumerate(merged)
    ]


def join_chapters(chapters: Iterable[Chapter]) -> str:
    return "".join(ch.raw for ch in chapters)


_CHAPTER_FILE = re.compile(r"^(\d+)[_-]?(.*)\.txt$")


def load_novel(
    path: str | Path,
    title: str | None = None,
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN,
) -> Novel:
    """Load a novel from a UTF-8 text file or a directory of ``NNN_title.txt`` files."""
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.is_file() and _CHAPTER_FILE.match(f.name))
        chapters = []
        for f in files:
            content = normalize_newlines(f.read_text(encoding="utf-8"))
            if not content.strip():
                continue
            heading = _CHAPTER_FILE.match(f.name).group(2).replace("_", " ").strip()
            body = content.strip()
            chapters.append(Chapter(len(chapters), heading, body, estimate_tokens(body, chars_per_token), content))
        if not chapters:
            raise EmptyInput(f"no chapter files found in {p}")
        return Novel(title or p.name, tuple(chapters), str(p))
    raw = p.read_text(encoding="utf-8")
    return Novel(title or p.stem, tuple(split_chapters(raw, chars_per_token=chars_per_token)), str(p))


def render_event_digest(events: Iterable["PlotEvent"]) -> str:
    return "\n".join(f"{e.id} | {e.place_time} | {e.description}" for e in events)


def build_window(
    novel: Novel,
    focus: int,
    prior_events: Sequence["PlotEvent"],
    cfg: WindowConfig = WindowConfig(),
) -> Window:
    """Assemble the extraction window for one chapter.

    Budget priority is focus text, then the prior-event digest (oldest lines
    dropped first), then look-ahead text, which is cut to whatever is left.
    """
    if not 0 <= focus < len(novel.chapters):
        raise IndexError(f"focus chapter {focus} out of range (0..{len(novel.chapters) - 1})")
    cpt = cfg.chars_per_token
    budget = cfg.context_token_budget
    focus_text = novel.chapters[focus].text
    focus_tokens = estimate_tokens(focus_text, cpt)
    if focus_tokens > budget:
        raise BudgetTooSmall(
            f"chapter {focus} needs ~{focus_tokens} tokens, budget is {budget}"
        )

    lines = render_event_digest(prior_events).splitlines()
    digest = "\n".join(lines)
    while lines and focus_tokens + estimate_tokens(digest, cpt) > budget:
        lines.pop(0)
        digest = "\n".join(lines)
    used = focus_tokens + estimate_tokens(digest, cpt)

    following = novel.chapters[focus + 1: focus + 1 + cfg.lookahead_chapters]
    lookahead = "\n\n".join(ch.text for ch in following)
    limit = _max_chars(budget - used, cpt)
    if len(lookahead) > limit:
        lookahead = lookahead[:limit]
    used += estimate_tokens(lookahead, cpt)

    return Window(
        focus_chapter=focus,
        prior_events_digest=digest,
        lookahead_text=lookahead,
        focus_text=focus_text,
        token_estimate=used,
    )


_SENTENCE_END = re.compile(r"[.!?…][\"'”’)\]]*(?=\s)|[.!?…][\"'”’)\]]*\Z")


def sentence_boundaries(doc: str) -> list[int]:
    """Offsets where a sentence may start or end: 0, after terminal punctuation, and len(doc)."""
    cuts = {0, len(doc)}
    for m in _SENTENCE_END.finditer(doc):
        cuts.add(m.end())
    return sorted(cuts)


def _partition(doc: str, target_chars: int, lo_chars: int, hi_chars: int) -> list[tuple[int, int]]:
    bounds = sentence_boundaries(doc)
    spans: list[tuple[int, int]] = []
    start = 0
    n = len(doc)
    while start < n:
        while start < n and doc[start].isspace():
            start += 1
        if start >= n:
            break
        ideal = start + target_chars
        candidates = [b for b in bounds if start + lo_chars <= b <= start + hi_chars]
        if candidates:
            end = min(candidates, key=lambda b: (abs(b - ideal), b))
        elif n - start <= hi_chars:
            end = n
        else:
            # no sentence end in range: fall back to the last whitespace before the ideal cut
            ws = doc.rfind(" ", start + lo_chars, ideal + 1)
            end = ws if ws > start else ideal
        spans.append((start, end))
        start = end
    return spans


def select_excerpts(
    doc: str,
    n: int,
    seed: int,
    target_tokens: int = 1000,
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN,
    source_id: str = "doc",
) -> list[Excerpt]:
    """Cut ``n`` non-overlapping excerpts of roughly ``target_tokens`` each.

    The document is partitioned at sentence ends into consecutive spans whose
    estimate stays within 20% of the target; a seeded sample of those spans is
    returned in document order. Fewer than ``n`` spans issues a
    :class:`DocTooShort` warning and returns what exists.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not doc.strip():
        raise EmptyInput("document is empty")
    lo_tokens = math.floor(target_tokens * 0.8)
    hi_tokens = math.ceil(target_tokens * 1.2)

    if estimate_tokens(doc.strip(), chars_per_token) <= hi_tokens:
        start = len(doc) - len(doc.lstrip())
        text = doc.strip()
        if n > 1:
            warnings.warn(DocTooShort(f"{source_id}: 1 excerpt available, {n} requested"), stacklevel=2)
        return [Excerpt(source_id, start, text, estimate_tokens(text, chars_per_token))]

    spans = _partition(
        doc,
        target_chars=_max_chars(target_tokens, chars_per_token),
        lo_chars=_max_chars(lo_tokens, chars_per_token),
        hi_chars=_max_chars(hi_tokens, chars_per_token),
    )
    usable = []
    for s, e in spans:
        text = doc[s:e].rstrip()
        if estimate_tokens(text, chars_per_token) >= lo_tokens:
            usable.append((s, text))
    if not usable:
        s, e = spans[0]
        usable = [(s, doc[s:e].rstrip())]

    if len(usable) < n:
        warnings.warn(DocTooShort(f"{source_id}: {len(usable)} excerpts available, {n} requested"), stacklevel=2)
        chosen = usable
    else:
        rng = random.Random(seed)
        chosen = sorted(rng.sample(usable, n))
    return [Excerpt(source_id, s, t, estimate_tokens(t, chars_per_token)) for s, t in chosen]
