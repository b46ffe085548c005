"""Fountain plain-text screenplay emission and a reader for round-tripping it."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

SLUGLINE_RE = re.compile(
    r"^(?:INT\.?/EXT\.?|EXT\.?/INT\.?|I/E\.?|INT\.|EXT\.|EST\.)[ \t]+\S.*$",
    re.IGNORECASE,
)
_CUE_RE = re.compile(r"^[A-Z0-9][A-Z0-9 .'&\-]*?(?:[ \t]*\([^)]*\))?(?:[ \t]*\^)?$")
_SHORTHAND_RE = re.compile(r"^([A-Z][A-Z0-9 .'\-]{0,30}):[ \t]+(\S.*)$")
_TITLE_KEY_RE = re.compile(r"^([A-Za-z][A-Za-z ]*):[ \t]*(.*)$")

DIALOGUE_INDENT = "    "


def is_slugline(line: str) -> bool:
    return bool(SLUGLINE_RE.match(line.strip()))


def normalize_slugline(line: str) -> str:
    return " ".join(line.strip().split()).upper()


def _is_cue(line: str) -> bool:
    s = line.strip()
    return (
        0 < len(s) <= 40
        and any(c.isalpha() for c in s)
        and s == s.upper()
        and bool(_CUE_RE.match(s))
        and not s.endswith("TO:")
        and not is_slugline(s)
    )


@dataclass(frozen=True)
class Action:
    text: str


@dataclass(frozen=True)
class Dialogue:
    character: str
    lines: tuple[str, ...]   # parentheticals kept as "(...)" lines


Element = Action | Dialogue


def _blocks(text: str) -> list[list[str]]:
    blocks: list[list[str]] = []
    cur: list[str] = []
    for line in text.replace("\r\n", "\n").split("\n"):
        if line.strip():
            cur.append(line.rstrip())
        elif cur:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    return blocks


def parse_body(text: str) -> list[Element]:
    """Split scene body text into action and dialogue elements.

    Paragraphs are separated by blank lines. A paragraph whose first line is
    an all-caps name and that has more lines is dialogue; ``NAME: line`` is
    read as one line of dialogue. ``!`` forces action and ``@`` forces a cue.
    """
    elements: list[Element] = []
    for block in _blocks(text):
        first = block[0].strip()
        if first.startswith("!"):
            elements.append(Action("\n".join([first[1:]] + [ln.strip() for ln in block[1:]])))
        elif first.startswith("@") and len(block) > 1:
            elements.append(Dialogue(first[1:].strip().upper(), tuple(ln.strip() for ln in block[1:])))
        elif len(block) > 1 and _is_cue(first):
            elements.append(Dialogue(first, tuple(ln.strip() for ln in block[1:])))
        elif len(block) == 1 and _SHORTHAND_RE.match(first):
            m = _SHORTHAND_RE.match(first)
            elements.append(Dialogue(m.group(1).strip(), (m.group(2).strip(),)))
        else:
            elements.append(Action("\n".join(ln.strip() for ln in block)))
    return elements


def _action_needs_force(text: str) -> bool:
    lines = text.split("\n")
    first = lines[0]
    return (
        first.startswith(("!", "@", "."))
        or is_slugline(first)
        or (len(lines) > 1 and _is_cue(first))
        or (len(lines) == 1 and bool(_SHORTHAND_RE.match(first)))
    )


def format_body(elements: list[Element]) -> str:
    """Canonical body text; ``parse_body(format_body(x)) == x`` for parsed elements."""
    blocks = []
    for el in elements:
        if isinstance(el, Action):
            blocks.append(("!" if _action_needs_force(el.text) else "") + el.text)
        else:
            cue = el.character.upper()
            if not _is_cue(cue):
                cue = "@" + cue
            blocks.append("\n".join([cue] + [DIALOGUE_INDENT + ln for ln in el.lines]))
    return "\n\n".join(blocks)


@dataclass
class FountainScene:
    slugline: str
    body: str


@dataclass
class FountainDocument:
    title_page: dict[str, str] = field(default_factory=dict)
    scenes: list[FountainScene] = field(default_factory=list)


def emit_document(doc: FountainDocument) -> str:
    out = []
    if doc.title_page:
        out.append("\n".join(f"{k}: {v}" for k, v in doc.title_page.items()))
    for sc in doc.scenes:
        body = format_body(parse_body(sc.body))
        out.append(normalize_slugline(sc.slugline) + ("\n\n" + body if body else ""))
    return "\n\n".join(out) + "\n"


def parse_fountain(text: str) -> FountainDocument:
    text = text.replace("\r\n", "\n")
    lines = text.split("\n")
    doc = FountainDocument()
    i = 0
    if lines and _TITLE_KEY_RE.match(lines[0]) and not is_slugline(lines[0]):
        while i < len(lines) and lines[i].strip():
            m = _TITLE_KEY_RE.match(lines[i])
            if m:
                doc.title_page[m.group(1).strip()] = m.group(2).strip()
            i += 1
    current: FountainScene | None = None
    body_lines: list[str] = []
    prev_blank = True
    for line in lines[i:]:
        if prev_blank and is_slugline(line) and not line.startswith("!"):
            if current is not None:
                current.body = format_body(parse_body("\n".join(body_lines)))
                doc.scenes.append(current)
            current = FountainScene(normalize_slugline(line), "")
            body_lines = []
        elif current is not None:
            body_lines.append(line)
        prev_blank = not line.strip()
    if current is not None:
        current.body = format_body(parse_body("\n".join(body_lines)))
        doc.scenes.append(current)
    return doc
