"""Causal plot graph: events, weighted causal edges, character arcs.

Edges are pruned into a DAG by a greedy pass that keeps strong edges between
low-degree events first and drops any edge whose start is already reachable
from its end.
"""

from __future__ import annotations

import enum
import json
import re
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import CyclicGraph, DanglingEndpoint

SCHEMA_VERSION = 1


class Strength(enum.IntEnum):
    LOW = 1
    MEDIUM = 2
    HIGH = 3

    @classmethod
    def parse(cls, value: "str | int | Strength") -> "Strength":
        if isinstance(value, Strength):
            return value
        if isinstance(value, int):
            return cls(value)
        key = str(value).strip().upper()
        if key in ("MIDDLE", "MID"):
            key = "MEDIUM"
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown strength {value!r}") from None


class TraversalMode(str, enum.Enum):
    DFT = "dft"
    BFT = "bft"
    CHAPTER = "chapter"

    @classmethod
    def parse(cls, value: "str | TraversalMode") -> "TraversalMode":
        if isinstance(value, TraversalMode):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown traversal mode {value!r}") from None


def event_id(chapter: int, seq: int) -> str:
    return f"c{chapter:02d}-e{seq:02d}"


EVENT_ID_RE = re.compile(r"\bc(\d+)-e(\d+)\b")


@dataclass(frozen=True)
class PlotEvent:
    id: str
    place_time: str
    background: str
    description: str
    characters: tuple[str, ...]
    chapter: int
    seq: int

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise ValueError(f"event {self.id} has an empty description")

    @property
    def sort_key(self) -> tuple[int, int, str]:
        return (self.chapter, self.seq, self.id)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "chapter": self.chapter,
            "seq": self.seq,
            "place_time": self.place_time,
            "background": self.background,
            "description": self.description,
            "characters": list(self.characters),
        }

    @classmethod
    def from_dict(cls, d: Mapping, id: str | None = None) -> "PlotEvent":
        eid = id or d["id"]
        chapter, seq = d.get("chapter"), d.get("seq")
        if chapter is None or seq is None:
            m = EVENT_ID_RE.fullmatch(eid)
            if not m:
                raise ValueError(f"event {eid!r} lacks chapter/seq and its id does not encode them")
            chapter, seq = int(m.group(1)), int(m.group(2))
        return cls(
            id=eid,
            place_time=d.get("place_time", ""),
            background=d.get("background", ""),
            description=d["description"],
            characters=tuple(d.get("characters", ())),
            chapter=int(chapter),
            seq=int(seq),
        )


@dataclass(frozen=True)
class CausalEdge:
    from_event: str
    to_event: str
    description: str
    strength: Strength
    order: int

    @property
    def pair(self) -> tuple[str, str]:
        return (self.from_event, self.to_event)

    def to_dict(self) -> dict:
        return {
            "from": self.from_event,
            "to": self.to_event,
            "description": self.description,
            "strength": self.strength.name,
            "order": self.order,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CausalEdge":
        return cls(
            from_event=d["from"],
            to_event=d["to"],
            description=d.get("description", ""),
            strength=Strength.parse(d["strength"]),
            order=int(d.get("order", 0)),
        )


@dataclass(frozen=True)
class BiographyEntry:
    event_id: str
    experience: str
    change: str = ""


@dataclass(frozen=True)
class Relation:
    other: str
    description: str


@dataclass
class CharacterArc:
    character: str
    biography: list[BiographyEntry] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "character": self.character,
            "biography": [
                {"event_id": b.event_id, "experience": b.experience, "change": b.change}
                for b in self.biography
            ],
            "relations": [{"other": r.other, "description": r.description} for r in self.relations],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CharacterArc":
        return cls(
            character=d["character"],
            biography=[BiographyEntry(b.get("event_id", ""), b["experience"], b.get("change", ""))
                       for b in d.get("biography", [])],
            relations=[Relation(r["other"], r.get("description", "")) for r in d.get("relations", [])],
        )


def merge_arcs(prior: Sequence[CharacterArc], new: Iterable[CharacterArc]) -> list[CharacterArc]:
    """Fold ``new`` arcs into ``prior`` by exact character name.

    Biography entries accumulate (an identical event id + experience is kept
    once). Relations are symmetrized eagerly; a later description for a pair
    replaces the earlier one on both sides.
    """
    arcs: dict[str, CharacterArc] = {}
    for a in prior:
        arcs[a.character] = CharacterArc(a.character, list(a.biography), list(a.relations))

    def arc_for(name: str) -> CharacterArc:
        if name not in arcs:
            arcs[name] = CharacterArc(name)
        return arcs[name]

    def set_relation(a: str, b: str, desc: str) -> None:
        arc = arc_for(a)
        for i, r in enumerate(arc.relations):
            if r.other == b:
                arc.relations[i] = Relation(b, desc)
                return
        arc.relations.append(Relation(b, desc))

    for a in new:
        arc = arc_for(a.character)
        seen = {(b.event_id, b.experience) for b in arc.biography}
        for entry in a.biography:
            if (entry.event_id, entry.experience) not in seen:
                arc.biography.append(entry)
                seen.add((entry.event_id, entry.experience))
        for rel in a.relations:
            if rel.other == a.character:
                continue
            set_relation(a.character, rel.other, rel.description)
            set_relation(rel.other, a.character, rel.description)
    return list(arcs.values())


def symmetrize_arcs(arcs: Sequence[CharacterArc]) -> list[CharacterArc]:
    return merge_arcs([], arcs)


@dataclass(frozen=True)
class PlotGraph:
    events: dict[str, PlotEvent]
    edges: tuple[CausalEdge, ...] = ()
    acyclic: bool = False

    def to_dict(self, fingerprint: str | None = None) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "acyclic": self.acyclic,
            "events": [e.to_dict() for e in self.events.values()],
            "edges": [e.to_dict() for e in self.edges],
        }
        if fingerprint is not None:
            doc["fingerprint"] = fingerprint
        return doc

    def to_json(self, fingerprint: str | None = None) -> str:
        return json.dumps(self.to_dict(fingerprint), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "PlotGraph":
        events = {}
        for raw in d["events"]:
            ev = PlotEvent.from_dict(raw)
            events[ev.id] = ev
        edges = tuple(CausalEdge.from_dict(e) for e in d.get("edges", []))
        graph = cls(events, edges, False)
        if d.get("acyclic"):
            # a hand-edited checkpoint may claim acyclicity it no longer has
            for e in edges:
                for end in e.pair:
                    if end not in events:
                        raise DanglingEndpoint(e.from_event, e.to_event, end)
            no_parallel = len({e.pair for e in edges}) == len(edges)
            graph = cls(events, edges, no_parallel and is_acyclic(graph))
        return graph


def sanitize_edges(
    edges: Sequence[CausalEdge], event_ids: Iterable[str] | None = None
) -> list[CausalEdge]:
    """Drop self-loops and collapse parallel edges.

    Among edges on the same ordered pair the strongest survives; ties go to
    the lowest extraction order. Survivors come back in extraction order.
    """
    if event_ids is not None:
        known = set(event_ids)
        for e in edges:
            for end in e.pair:
                if end not in known:
                    raise DanglingEndpoint(e.from_event, e.to_event, end)
    best: dict[tuple[str, str], CausalEdge] = {}
    for e in edges:
        if e.from_event == e.to_event:
            continue
        cur = best.get(e.pair)
        if cur is None or (e.strength, -e.order) > (cur.strength, -cur.order):
            best[e.pair] = e
    return sorted(best.values(), key=lambda e: e.order)


def edge_priority(edges: Sequence[CausalEdge]) -> list[int]:
    """Indices of ``edges`` in greedy order: strength desc, endpoint degree sum asc, extraction order asc.

    Degrees are counted once over ``edges`` and not updated as edges are dropped.
    """
    degree: dict[str, int] = defaultdict(int)
    for e in edges:
        degree[e.from_event] += 1
        degree[e.to_event] += 1
    return sorted(
        range(len(edges)),
        key=lambda i: (
            -edges[i].strength,
            degree[edges[i].from_event] + degree[edges[i].to_event],
            edges[i].order,
            i,
        ),
    )


def greedy_cycle_break(
    events: Iterable[PlotEvent | str], edges: Sequence[CausalEdge]
) -> tuple[list[CausalEdge], list[CausalEdge]]:
    """Return ``(kept, skipped)`` for the greedy cycle-breaking pass.

    Edges are taken in :func:`edge_priority` order; ``a -> b`` is skipped
    when ``b`` already reaches ``a`` through kept edges.
    ``kept`` is in input order, ``skipped`` in the order edges were rejected.
    """
    reach: dict[str, set[str]] = defaultdict(set)   # forward reachable, excluding self
    ancestors: dict[str, set[str]] = defaultdict(set)
    kept_idx: list[int] = []
    skipped: list[CausalEdge] = []

    for i in edge_priority(edges):
        a, b = edges[i].from_event, edges[i].to_event
        if a == b or a in reach[b]:
            skipped.append(edges[i])
            continue
        kept_idx.append(i)
        preds = ancestors[a] | {a}
        succs = reach[b] | {b}
        for p in preds:
            reach[p] |= succs
        for s in succs:
            ancestors[s] |= preds

    return [edges[i] for i in sorted(kept_idx)], skipped


def break_cycles(events: Iterable[PlotEvent | str], edges: Sequence[CausalEdge]) -> list[CausalEdge]:
    return greedy_cycle_break(events, edges)[0]


def kahn_order(nodes: Iterable[str], edges: Iterable[CausalEdge]) -> list[str] | None:
    """Topological order by Kahn's algorithm, or None when a cycle remains."""
    nodes = list(dict.fromkeys(nodes))
    indeg = {n: 0 for n in nodes}
    out: dict[str, list[str]] = defaultdict(list)
    for e in edges:
        indeg.setdefault(e.from_event, 0)
        indeg[e.to_event] = indeg.get(e.to_event, 0) + 1
        out[e.from_event].append(e.to_event)
    queue = deque(n for n, d in indeg.items() if d == 0)
    order = []
    while queue:
        n = queue.popleft()
        order.append(n)
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                queue.append(m)
    return order if len(order) == len(indeg) else None


def is_acyclic(graph: PlotGraph) -> bool:
    return kahn_order(graph.events, graph.edges) is not None


def traverse(graph: PlotGraph, mode: TraversalMode | str) -> list[str]:
    """Order every event id for outline rendering.

    CHAPTER sorts by (chapter, seq). BFT emits Kahn levels, each level sorted
    by (chapter, seq). DFT is a preorder walk from the roots, children in
    (chapter, seq) order, each event emitted the first time it is reached.
    """
    mode = TraversalMode.parse(mode)
    if not graph.acyclic:
        raise CyclicGraph("traversal requires an acyclic graph; run break_cycles first")
    key = lambda eid: graph.events[eid].sort_key  # noqa: E731
    if mode is TraversalMode.CHAPTER:
        return sorted(graph.events, key=key)

    children: dict[str, list[str]] = defaultdict(list)
    indeg = {eid: 0 for eid in graph.events}
    for e in graph.edges:
        children[e.from_event].append(e.to_event)
        indeg[e.to_event] += 1
    for kids in children.values():
        kids.sort(key=key)

    if mode is TraversalMode.BFT:
        order: list[str] = []
        level = sorted((n for n, d in indeg.items() if d == 0), key=key)
        while level:
            order.extend(level)
            nxt = []
            for n in level:
                for m in children[n]:
                    indeg[m] -= 1
                    if indeg[m] == 0:
                        nxt.append(m)
            level = sorted(nxt, key=key)
        return order

    order = []
    seen: set[str] = set()
    roots = sorted((n for n, d in indeg.items() if d == 0), key=key)
    for root in roots:
        stack = [root]
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            order.append(n)
            stack.extend(reversed([m for m in children[n] if m not in seen]))
    return order


_PENWIDTH = {Strength.HIGH: 3.0, Strength.MEDIUM: 2.0, Strength.LOW: 1.0}


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def to_dot(graph: PlotGraph, max_label: int = 48) -> str:
    lines = ["digraph plot {", "  rankdir=LR;", "  node [shape=box];"]
    for ev in sorted(graph.events.values(), key=lambda e: e.sort_key):
        desc = ev.description if len(ev.description) <= max_label else ev.description[: max_label - 3] + "..."
        lines.append(f"  {_dot_quote(ev.id)} [label={_dot_quote(ev.id + chr(10) + desc)}];")
    for e in graph.edges:
        lines.append(
            f"  {_dot_quote(e.from_event)} -> {_dot_quote(e.to_event)} "
            f"[label={e.strength.name}, penwidth={_PENWIDTH[e.strength]}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
