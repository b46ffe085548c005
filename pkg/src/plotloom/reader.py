"""Reader stage: windowed event/arc extraction, refinement, relation passes, graph assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from pydantic import BaseModel, Field, field_validator

from .checkpoints import write_checkpoint
from .corpus import Novel, Window, WindowConfig, _max_chars, build_window, estimate_tokens, render_event_digest
from .errors import BackendError, MalformedOutput, PlotloomError, SchemaViolation, StageError
from .llmio import Backend, GenerationOptions, ask_structured, load_template
from .plotgraph import (
    CausalEdge,
    CharacterArc,
    PlotEvent,
    PlotGraph,
    Strength,
    event_id,
    greedy_cycle_break,
    merge_arcs,
    sanitize_edges,
    symmetrize_arcs,
)
from .refine import (
    RefineConfig,
    RefineHooks,
    RefinementRound,
    SupportCorpus,
    format_locations,
    har_refine,
    render_items,
)

log = logging.getLogger(__name__)

ARC_PREFIX = "arc:"


class _EventDraft(BaseModel):
    place_time: str = ""
    background: str = ""
    description: str = Field(min_length=1)
    characters: list[str] = []


class EventsPayload(BaseModel):
    events: list[_EventDraft]


class _BioDraft(BaseModel):
    event_id: str = ""
    experience: str = Field(min_length=1)
    change: str = ""


class _RelationDraft(BaseModel):
    other: str = Field(min_length=1)
    description: str = ""


class _ArcDraft(BaseModel):
    character: str = Field(min_length=1)
    biography: list[_BioDraft] = []
    relations: list[_RelationDraft] = []


class ArcsPayload(BaseModel):
    arcs: list[_ArcDraft]


class _EdgeDraft(BaseModel):
    from_event: str = Field(alias="from")
    to_event: str = Field(alias="to")
    description: str = ""
    strength: Strength

    @field_validator("strength", mode="before")
    @classmethod
    def _strength(cls, v: Any) -> Strength:
        return Strength.parse(v)


class RelationsPayload(BaseModel):
    relations: list[_EdgeDraft]


def _arcs_text(arcs: Sequence[CharacterArc]) -> str:
    if not arcs:
        return "(none yet)"
    lines = []
    for a in arcs:
        bio = "; ".join(f"{b.event_id}: {b.experience}" for b in a.biography)
        rel = "; ".join(f"{r.other} ({r.description})" for r in a.relations)
        lines.append(f"- {a.character}. Biography: {bio or '-'}. Relations: {rel or '-'}.")
    return "\n".join(lines)


def extract_window_events(
    window: Window,
    backend: Backend,
    title: str = "",
    opts: GenerationOptions = GenerationOptions(),
) -> list[PlotEvent]:
    req = load_template("extract_events").request(
        "extract_events",
        temperature=opts.temperature,
        max_tokens=opts.max_tokens,
        title=title,
        chapter=window.focus_chapter,
        digest=window.prior_events_digest or "(none yet)",
        focus=window.focus_text,
        lookahead=window.lookahead_text or "(none)",
    )
    payload = ask_structured(backend, req, EventsPayload).value
    ch = window.focus_chapter
    return [
        PlotEvent(
            id=event_id(ch, seq),
            place_time=d.place_time,
            background=d.background,
            description=d.description,
            characters=tuple(d.characters),
            chapter=ch,
            seq=seq,
        )
        for seq, d in enumerate(payload.events)
    ]


def extract_window_arcs(
    window: Window,
    prior_arcs: Sequence[CharacterArc],
    backend: Backend,
    window_events: Sequence[PlotEvent] = (),
    title: str = "",
    opts: GenerationOptions = GenerationOptions(),
) -> list[CharacterArc]:
    """Extract character profiles for one window and fold them into ``prior_arcs``."""
    req = load_template("extract_arcs").request(
        "extract_arcs",
        temperature=opts.temperature,
        max_tokens=opts.max_tokens,
        title=title,
        chapter=window.focus_chapter,
        prior_arcs=_arcs_text(prior_arcs),
        events=render_event_digest(window_events) or "(none)",
        focus=window.focus_text,
        lookahead=window.lookahead_text or "(none)",
    )
    payload = ask_structured(backend, req, ArcsPayload).value
    new = [CharacterArc.from_dict(a.model_dump()) for a in payload.arcs]
    return merge_arcs(prior_arcs, new)


# -- refinement over the whole extraction ------------------------------------


def _validate_read_item(item_id: str, value: Any) -> None:
    try:
        if item_id.startswith(ARC_PREFIX):
            arc = CharacterArc.from_dict(value)
            if arc.character != item_id[len(ARC_PREFIX):]:
                raise SchemaViolation("character", f"does not match item id {item_id!r}")
        else:
            PlotEvent.from_dict(value, id=item_id)
    except SchemaViolation:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        field_name = exc.args[0] if isinstance(exc, KeyError) else item_id
        raise SchemaViolation(str(field_name), f"refined item {item_id} is invalid: {exc}") from exc


def _read_hooks(novel: Novel, opts: GenerationOptions) -> RefineHooks:
    chapter_list = "\n".join(f"{c.index}: {c.heading or '(untitled)'}" for c in novel.chapters)

    def locate(items: Mapping[str, Any], t: int):
        return load_template("read_locate").request(
            "read.locate", temperature=opts.temperature, max_tokens=opts.max_tokens,
            round=t, items=render_items(items), chapters=chapter_list,
        )

    def refine(items, locations, suggestions, context, t):
        return load_template("read_refine").request(
            "read.refine", temperature=opts.temperature, max_tokens=opts.max_tokens,
            issues=format_locations(locations, suggestions), context=context or "(none)",
        )

    return RefineHooks(locate=locate, refine=refine, validate_item=_validate_read_item)


def extraction_items(events: Sequence[PlotEvent], arcs: Sequence[CharacterArc]) -> dict[str, Any]:
    items: dict[str, Any] = {e.id: e.to_dict() for e in events}
    items.update({ARC_PREFIX + a.character: a.to_dict() for a in arcs})
    return items


def split_items(items: Mapping[str, Any]) -> tuple[list[PlotEvent], list[CharacterArc]]:
    events = [PlotEvent.from_dict(v, id=k) for k, v in items.items() if not k.startswith(ARC_PREFIX)]
    events.sort(key=lambda e: e.sort_key)
    arcs = symmetrize_arcs([CharacterArc.from_dict(v) for k, v in items.items() if k.startswith(ARC_PREFIX)])
    return events, arcs


def read_novel(
    novel: Novel,
    cfg: WindowConfig,
    rcfg: RefineConfig,
    backend: Backend,
    opts: GenerationOptions = GenerationOptions(),
    checkpoint_dir: str | Path | None = None,
    fingerprint: str = "",
) -> tuple[list[PlotEvent], list[CharacterArc], list[RefinementRound]]:
    """Slide over the chapters, then refine the combined extraction once.

    Window ``k`` sees the events of every earlier window in its digest. On an
    unrecoverable error the partial extraction is written to
    ``events.partial.json`` (when a checkpoint directory is given) before a
    :class:`StageError` naming the chapter is raised.
    """
    events: list[PlotEvent] = []
    arcs: list[CharacterArc] = []

    def fail(exc: Exception, chapter: int | None) -> StageError:
        where = None
        if checkpoint_dir is not None:
            where = str(write_checkpoint(
                Path(checkpoint_dir) / "events.partial.json", "events.partial",
                {"events": [e.to_dict() for e in events], "arcs": [a.to_dict() for a in arcs],
                 "failed_chapter": chapter},
                fingerprint,
            ))
        return StageError("read", str(exc), chapter=chapter, checkpoint=where)

    for ch in novel.chapters:
        try:
            window = build_window(novel, ch.index, events, cfg)
            found = extract_window_events(window, backend, novel.title, opts)
            arcs = extract_window_arcs(window, arcs, backend, found, novel.title, opts)
        except (BackendError, MalformedOutput) as exc:
            raise fail(exc, ch.index) from exc
        events.extend(found)
        log.info("chapter %d: %d events, %d characters so far", ch.index, len(found), len(arcs))

    support = SupportCorpus(
        chapters={c.index: c.text for c in novel.chapters},
        token_budget=cfg.context_token_budget,
        chars_per_token=cfg.chars_per_token,
    )
    try:
        items, trace = har_refine(extraction_items(events, arcs), support, backend, rcfg, _read_hooks(novel, opts))
    except PlotloomError as exc:
        raise fail(exc, None) from exc
    events, arcs = split_items(items)
    return events, arcs, trace


# -- relations ---------------------------------------------------------------


@dataclass
class RelationExtraction:
    edges: list[CausalEdge]
    passes: int
    dropped: list[CausalEdge] = field(default_factory=list)   # unknown endpoints


def _chapters_context(chapters: Sequence[str], budget_tokens: int, chars_per_token: float) -> str:
    parts = []
    remaining = budget_tokens
    for i, text in enumerate(chapters):
        block = f"## Chapter {i}\n{text}"
        room = _max_chars(remaining, chars_per_token)
        if room <= 0:
            break
        block = block[:room]
        parts.append(block)
        remaining -= estimate_tokens(block, chars_per_token)
    return "\n\n".join(parts)


def _edges_text(edges: Sequence[CausalEdge]) -> str:
    return "\n".join(f"{e.from_event} -> {e.to_event} [{e.strength.name}]: {e.description}" for e in edges)


def extract_relations(
    events: Sequence[PlotEvent],
    chapters: Sequence[str],
    backend: Backend,
    max_passes: int = 5,
    title: str = "",
    context_budget: int = 4096,
    chars_per_token: float = 4.0,
    opts: GenerationOptions = GenerationOptions(),
) -> RelationExtraction:
    """Prompt for causal relations until a pass adds no new (from, to) pair.

    Each pass sees everything found so far. A repeated pair with new wording
    is ignored; edges naming unknown events are dropped and reported.
    """
    if max_passes < 1:
        raise ValueError("max_passes must be at least 1")
    if len(events) < 2:
        return RelationExtraction([], 0)
    known_ids = {e.id for e in events}
    edges: list[CausalEdge] = []
    pairs: set[tuple[str, str]] = set()
    dropped: list[CausalEdge] = []
    chapter_ctx = _chapters_context(chapters, context_budget, chars_per_token)
    events_text = render_event_digest(sorted(events, key=lambda e: e.sort_key))
    passes = 0
    while passes < max_passes:
        passes += 1
        req = load_template("extract_relations").request(
            "extract_relations", temperature=opts.temperature, max_tokens=opts.max_tokens,
            title=title, pass_number=passes, events=events_text,
            known=_edges_text(edges) or "(none yet)", chapters=chapter_ctx or "(none)",
        )
        payload = ask_structured(backend, req, RelationsPayload).value
        added = 0
        for d in payload.relations:
            edge = CausalEdge(d.from_event, d.to_event, d.description, d.strength,
                              order=len(edges) + len(dropped))
            if d.from_event not in known_ids or d.to_event not in known_ids:
                log.warning("dropping relation with unknown event id: %s -> %s", d.from_event, d.to_event)
                dropped.append(edge)
                continue
            if edge.pair in pairs:
                continue
            pairs.add(edge.pair)
            edges.append(edge)
            added += 1
        log.info("relation pass %d: %d new", passes, added)
        if added == 0:
            break
    return RelationExtraction(edges, passes, dropped)


# -- graph assembly ----------------------------------------------------------


@dataclass
class GraphStats:
    nodes: int
    kept: int
    dropped: dict[str, list[CausalEdge]]

    def summary(self) -> dict[str, int]:
        return {"nodes": self.nodes, "kept": self.kept, **{k: len(v) for k, v in self.dropped.items()}}


def assemble_plot_graph(
    events: Sequence[PlotEvent], edges: Sequence[CausalEdge]
) -> tuple[PlotGraph, GraphStats]:
    known = {e.id for e in events}
    dangling = [e for e in edges if e.from_event not in known or e.to_event not in known]
    valid = [e for e in edges if e.from_event in known and e.to_event in known]
    self_loops = [e for e in valid if e.from_event == e.to_event]
    clean = sanitize_edges(valid, known)
    survivors = set(map(id, clean))
    duplicates = [e for e in valid if e.from_event != e.to_event and id(e) not in survivors]
    kept, cyclic = greedy_cycle_break(events, clean)
    graph = PlotGraph({e.id: e for e in events}, tuple(kept), acyclic=True)
    stats = GraphStats(
        nodes=len(events),
        kept=len(kept),
        dropped={"dangling": dangling, "self_loop": self_loops, "duplicate": duplicates, "cycle": cyclic},
    )
    log.info("plot graph: %s", stats.summary())
    return graph, stats


def build_plot_graph(events: Sequence[PlotEvent], edges: Sequence[CausalEdge]) -> PlotGraph:
    return assemble_plot_graph(events, edges)[0]
