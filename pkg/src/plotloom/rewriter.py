"""Rewriter stage: adaptation outline, scene-by-scene writing, screenplay assembly."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from pydantic import BaseModel, Field, ValidationError

from .checkpoints import write_checkpoint
from .corpus import DEFAULT_CHARS_PER_TOKEN, Novel, _max_chars, estimate_tokens
from .errors import CountMismatch, InvalidSlugline, SchemaViolation, UnknownEventId
from .fountain import FountainDocument, FountainScene, emit_document, is_slugline, parse_fountain
from .llmio import Backend, GenerationOptions, ask_structured, load_template
from .plotgraph import CharacterArc, PlotGraph, TraversalMode, traverse
from .refine import (
    IssueKind,
    IssueLocation,
    RefineConfig,
    RefineHooks,
    RefinementRound,
    SupportCorpus,
    format_locations,
    har_refine,
    render_items,
    unresolved,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScenePlan:
    index: int
    storyline: str
    goal: str
    place_time: str
    character_experiences: str
    source_events: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "storyline": self.storyline,
            "goal": self.goal,
            "place_time": self.place_time,
            "character_experiences": self.character_experiences,
            "source_events": list(self.source_events),
        }

    @classmethod
    def from_dict(cls, d: Mapping, index: int | None = None) -> "ScenePlan":
        return cls(
            index=int(d["index"] if index is None else index),
            storyline=d.get("storyline", ""),
            goal=d["goal"],
            place_time=d.get("place_time", ""),
            character_experiences=d.get("character_experiences", ""),
            source_events=tuple(d.get("source_events", ())),
        )


@dataclass
class Outline:
    core_elements: dict[str, str]
    structure: dict[str, Any]
    plans: list[ScenePlan]
    traversal_mode: str = TraversalMode.BFT.value
    trace: list[RefinementRound] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.plans:
            raise ValueError("an outline needs at least one scene plan")
        for i, p in enumerate(self.plans):
            if p.index != i:
                raise ValueError(f"plan indices must be contiguous from 0, got {p.index} at {i}")

    def to_dict(self) -> dict:
        return {
            "traversal_mode": self.traversal_mode,
            "core_elements": self.core_elements,
            "structure": self.structure,
            "plans": [p.to_dict() for p in self.plans],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Outline":
        return cls(
            core_elements=dict(d["core_elements"]),
            structure=dict(d["structure"]),
            plans=[ScenePlan.from_dict(p, i) for i, p in enumerate(d["plans"])],
            traversal_mode=d.get("traversal_mode", TraversalMode.BFT.value),
        )


@dataclass
class Scene:
    index: int
    slugline: str
    body: str
    plan_index: int
    refinement_rounds: int = 0
    goal_unmet: bool = False
    trace: list[RefinementRound] = field(default_factory=list, repr=False, compare=False)

    @property
    def text(self) -> str:
        return f"{self.slugline}\n\n{self.body}"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "plan_index": self.plan_index,
            "slugline": self.slugline,
            "body": self.body,
            "refinement_rounds": self.refinement_rounds,
            "goal_unmet": self.goal_unmet,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scene":
        return cls(
            index=int(d["index"]),
            slugline=d["slugline"],
            body=d["body"],
            plan_index=int(d.get("plan_index", d["index"])),
            refinement_rounds=int(d.get("refinement_rounds", 0)),
            goal_unmet=bool(d.get("goal_unmet", False)),
        )


@dataclass
class Screenplay:
    title: str
    scenes: list[Scene]
    traversal_mode: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "traversal_mode": self.traversal_mode,
            "metadata": self.metadata,
            "scenes": [s.to_dict() for s in self.scenes],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Screenplay":
        scenes = [Scene.from_dict(s) for s in d["scenes"]]
        return cls(d["title"], scenes, d["traversal_mode"], dict(d.get("metadata", {})))


# -- wire schemas ------------------------------------------------------------


class _CorePayload(BaseModel):
    theme: str = Field(min_length=1)
    premise: str = Field(min_length=1)
    key_relationships: str = ""


class _StructurePayload(BaseModel):
    label: str = Field(min_length=1)
    acts: list[str] = Field(min_length=1)


class _PlanDraft(BaseModel):
    storyline: str = ""
    goal: str = Field(min_length=1)
    place_time: str = ""
    character_experiences: str = ""
    source_events: list[str] = []


class _PlansPayload(BaseModel):
    plans: list[_PlanDraft] = Field(min_length=1)


class _SceneDraft(BaseModel):
    slugline: str = Field(min_length=1)
    body: str = Field(min_length=1)


def _check_slugline(draft: _SceneDraft) -> None:
    if not is_slugline(draft.slugline):
        raise SchemaViolation(
            "slugline", f"{draft.slugline!r} is not a screenplay scene heading (INT./EXT. PLACE - TIME)")


# -- outline -----------------------------------------------------------------


def render_events(graph: PlotGraph, order: Sequence[str]) -> str:
    lines = []
    for eid in order:
        ev = graph.events[eid]
        who = f" ({', '.join(ev.characters)})" if ev.characters else ""
        lines.append(f"{ev.id} | {ev.place_time} | {ev.description}{who}")
    return "\n".join(lines)


def render_edges(graph: PlotGraph) -> str:
    lines = [f"{e.from_event} -> {e.to_event} [{e.strength.name}]: {e.description}" for e in graph.edges]
    return "\n".join(lines) or "(none)"


def render_arcs(arcs: Sequence[CharacterArc]) -> str:
    lines = []
    for a in arcs:
        bio = "; ".join(f"{b.event_id}: {b.experience}" + (f" ({b.change})" if b.change else "") for b in a.biography)
        rel = "; ".join(f"{r.other}: {r.description}" for r in a.relations)
        lines.append(f"- {a.character}\n  biography: {bio or '-'}\n  relations: {rel or '-'}")
    return "\n".join(lines) or "(none)"


def _plan_key(i: int) -> str:
    return f"plan-{i:03d}"


def generate_outline(
    graph: PlotGraph,
    arcs: Sequence[CharacterArc],
    mode: TraversalMode | str,
    backend: Backend,
    rcfg: RefineConfig,
    opts: GenerationOptions = GenerationOptions(),
    *,
    title: str = "",
    novel: Novel | None = None,
    target_scenes: int | None = None,
    token_budget: int = 8192,
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN,
) -> Outline:
    """Generate core elements, structure and scene plans, then align the plans.

    The plot graph is rendered in the chosen traversal order. Plans citing
    events missing from the graph are fed to refinement as UNALIGNED issues;
    any that survive refinement raise :class:`UnknownEventId`.
    """
    mode = TraversalMode.parse(mode)
    order = traverse(graph, mode)
    events_text = render_events(graph, order)
    edges_text = render_edges(graph)
    arcs_text = render_arcs(arcs)
    gen = {"temperature": opts.temperature, "max_tokens": opts.max_tokens}

    core = ask_structured(
        backend,
        load_template("outline_core").request(
            "outline.core", **gen, title=title, mode=mode.name, events=events_text, edges=edges_text, arcs=arcs_text),
        _CorePayload,
    ).value.model_dump()
    structure = ask_structured(
        backend,
        load_template("outline_structure").request(
            "outline.structure", **gen, title=title, core=json.dumps(core, ensure_ascii=False, indent=2),
            mode=mode.name, events=events_text),
        _StructurePayload,
    ).value.model_dump()

    def check_count(p: _PlansPayload) -> None:
        if target_scenes is not None and len(p.plans) != target_scenes:
            raise SchemaViolation("plans", f"expected exactly {target_scenes} scene plans, got {len(p.plans)}")

    scene_target = f"Plan exactly {target_scenes} scenes." if target_scenes else ""
    drafts = ask_structured(
        backend,
        load_template("outline_plans").request(
            "outline.plans", **gen, title=title, core=json.dumps(core, ensure_ascii=False, indent=2),
            structure=json.dumps(structure, ensure_ascii=False, indent=2), mode=mode.name,
            events=events_text, edges=edges_text, arcs=arcs_text, scene_target=scene_target),
        _PlansPayload,
        check_count,
    ).value.plans
    items = {_plan_key(i): d.model_dump() for i, d in enumerate(drafts)}

    def precheck(current: Mapping[str, Any]) -> list[tuple[IssueLocation, str]]:
        found = []
        for key, plan in current.items():
            missing = [e for e in plan.get("source_events", []) if e not in graph.events]
            if missing:
                note = f"cites events not in the plot graph: {', '.join(missing)}"
                found.append((IssueLocation((key,), IssueKind.UNALIGNED, note),
                              "replace them with event ids from the plot graph"))
        return found

    def validate(item_id: str, value: Any) -> None:
        try:
            _PlanDraft.model_validate(value)
        except ValidationError as exc:
            loc = exc.errors()[0]["loc"]
            raise SchemaViolation(str(loc[-1]) if loc else item_id, f"plan {item_id} invalid") from exc

    def locate(current, t):
        return load_template("outline_locate").request(
            "outline.locate", **gen, round=t, items=render_items(current), events=events_text, arcs=arcs_text)

    def refine(current, locations, suggestions, context, t):
        return load_template("outline_refine").request(
            "outline.refine", **gen, issues=format_locations(locations, suggestions), context=context or "(none)")

    support = SupportCorpus(
        chapters={c.index: c.text for c in novel.chapters} if novel else {},
        records={eid: ev.to_dict() for eid, ev in graph.events.items()},
        token_budget=token_budget,
        chars_per_token=chars_per_token,
    )
    items, trace = har_refine(items, support, backend, rcfg,
                              RefineHooks(locate=locate, refine=refine, validate_item=validate, precheck=precheck))

    plans = [ScenePlan.from_dict(v, i) for i, v in enumerate(items.values())]
    bad = sorted({e for p in plans for e in p.source_events if e not in graph.events})
    if bad:
        raise UnknownEventId(bad)
    return Outline(core, structure, plans, mode.value, trace)


# -- scenes ------------------------------------------------------------------


def scene_context(
    plan: ScenePlan,
    graph: PlotGraph,
    novel: Novel | None,
    prev_scene: Scene | None,
    budget: int = 8192,
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN,
) -> str:
    """Source-event records, their chapters (each once) and the previous scene.

    Event records and the previous scene are kept whole; chapter text shares
    whatever budget is left, earliest chapter first.
    """
    records = [graph.events[e] for e in plan.source_events if e in graph.events]
    fixed = ["## Source events\n" + ("\n".join(
        f"{e.id} | {e.place_time} | {e.background} | {e.description}" for e in records) or "(none)")]
    prev = f"## Previous scene\n{prev_scene.text}" if prev_scene is not None else ""

    remaining = budget - sum(estimate_tokens(s, chars_per_token) for s in fixed + [prev] if s)
    chapter_blocks = []
    if novel is not None:
        for ch in sorted({e.chapter for e in records}):
            if not 0 <= ch < len(novel.chapters):
                continue
            header = f"## Chapter {ch}\n"
            room = _max_chars(remaining, chars_per_token) - len(header)
            if room <= 0:
                break
            block = header + novel.chapters[ch].text[:room]
            chapter_blocks.append(block)
            remaining -= estimate_tokens(block, chars_per_token)
    return "\n\n".join(fixed + chapter_blocks + ([prev] if prev else []))


def generate_scene(
    plan: ScenePlan,
    context: str,
    backend: Backend,
    rcfg: RefineConfig,
    opts: GenerationOptions = GenerationOptions(),
    index: int | None = None,
) -> Scene:
    """Write one scene, then check it against the plan's goal.

    If the round budget runs out with the goal still reported unmet, the
    scene is returned with ``goal_unmet`` set.
    """
    index = plan.index if index is None else index
    gen = {"temperature": opts.temperature, "max_tokens": opts.max_tokens}
    draft = ask_structured(
        backend,
        load_template("scene").request(
            "scene", **gen, index=index, storyline=plan.storyline, goal=plan.goal, place_time=plan.place_time,
            character_experiences=plan.character_experiences, context=context),
        _SceneDraft,
        _check_slugline,
    ).value

    def locate(current, t):
        return load_template("scene_locate").request(
            "scene.locate", **gen, round=t, goal=plan.goal, storyline=plan.storyline, items=render_items(current))

    def refine(current, locations, suggestions, ctx, t):
        return load_template("scene_refine").request(
            "scene.refine", **gen, goal=plan.goal, issues=format_locations(locations, suggestions),
            context=ctx or "(none)", scene_context=context)

    def validate(item_id: str, value: Any) -> None:
        if item_id != "scene":
            raise SchemaViolation("id", f"expected item id 'scene', got {item_id!r}")
        try:
            _check_slugline(_SceneDraft.model_validate(value))
        except ValidationError as exc:
            loc = exc.errors()[0]["loc"]
            raise SchemaViolation(str(loc[-1]) if loc else "scene", "refined scene invalid") from exc

    items, trace = har_refine({"scene": draft.model_dump()}, SupportCorpus(chapters={}), backend, rcfg,
                              RefineHooks(locate=locate, refine=refine, validate_item=validate))
    final = items["scene"]
    goal_unmet = unresolved(trace)
    if goal_unmet:
        log.warning("scene %d: goal still unmet after %d rounds", index, len(trace))
    return Scene(
        index=index,
        slugline=final["slugline"],
        body=final["body"],
        plan_index=plan.index,
        refinement_rounds=len(trace) - 1,
        goal_unmet=goal_unmet,
        trace=trace,
    )


def write_scenes(
    outline: Outline,
    graph: PlotGraph,
    novel: Novel | None,
    backend: Backend,
    rcfg: RefineConfig,
    opts: GenerationOptions = GenerationOptions(),
    budget: int = 8192,
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN,
    checkpoint_dir: str | Path | None = None,
    fingerprint: str = "",
) -> list[Scene]:
    """Generate every planned scene in order, each seeing the one before it."""
    scenes: list[Scene] = []
    prev = None
    for plan in outline.plans:
        ctx = scene_context(plan, graph, novel, prev, budget, chars_per_token)
        scene = generate_scene(plan, ctx, backend, rcfg, opts, index=len(scenes))
        if checkpoint_dir is not None:
            write_checkpoint(Path(checkpoint_dir) / "scenes" / f"scene_{scene.index:03d}.json",
                             "scene", scene.to_dict(), fingerprint)
        scenes.append(scene)
        prev = scene
    return scenes


def assemble_screenplay(outline: Outline, scenes: Sequence[Scene], meta: Mapping[str, Any]) -> Screenplay:
    if len(scenes) != len(outline.plans):
        raise CountMismatch(f"{len(outline.plans)} plans but {len(scenes)} scenes")
    ordered = sorted(scenes, key=lambda s: s.plan_index)
    if [s.plan_index for s in ordered] != [p.index for p in outline.plans]:
        raise CountMismatch("scenes do not cover every plan exactly once")
    bad = [s.index for s in ordered if not is_slugline(s.slugline)]
    if bad:
        raise InvalidSlugline(bad)
    meta = dict(meta)
    return Screenplay(
        title=meta.pop("title", ""),
        scenes=list(ordered),
        traversal_mode=outline.traversal_mode,
        metadata=meta,
    )


def emit_fountain(sp: Screenplay) -> str:
    bad = [i for i, s in enumerate(sp.scenes) if not is_slugline(s.slugline)]
    if bad:
        raise InvalidSlugline(bad)
    title_page = {"Title": sp.title or "Untitled", "Credit": "Screenplay adaptation"}
    source = sp.metadata.get("source_title")
    if source:
        title_page["Source"] = f"the novel {source}"
    doc = FountainDocument(title_page, [FountainScene(s.slugline, s.body) for s in sp.scenes])
    return emit_document(doc)


def screenplay_from_fountain(text: str, traversal_mode: str = "") -> Screenplay:
    """Rebuild a screenplay from Fountain text; enough to re-emit it identically."""
    doc = parse_fountain(text)
    meta = {}
    source = doc.title_page.get("Source", "")
    if source.startswith("the novel "):
        meta["source_title"] = source[len("the novel "):]
    scenes = [Scene(i, sc.slugline, sc.body, i) for i, sc in enumerate(doc.scenes)]
    return Screenplay(doc.title_page.get("Title", ""), scenes, traversal_mode, meta)
