"""Stage functions over a run directory.

Each stage reads the previous stage's checkpoint files (so hand edits are
honoured) and writes its own. Every JSON artifact carries the fingerprint of
the configuration that produced it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .checkpoints import read_checkpoint, write_checkpoint
from .config import Config
from .corpus import Novel, load_novel
from .errors import ConfigError, MissingCheckpoint, PlotloomError, StageError
from .llmio import Backend, make_backend, set_template_dir
from .plotgraph import CausalEdge, CharacterArc, PlotEvent, PlotGraph, to_dot
from .reader import assemble_plot_graph, extract_relations, read_novel
from .refine import write_trace
from .rewriter import Outline, assemble_screenplay, emit_fountain, generate_outline, write_scenes

log = logging.getLogger(__name__)

STAGES = ("ingest", "read", "graph", "outline", "write")

# the file whose presence marks a stage as complete
STAGE_OUTPUT = {
    "ingest": "chapters.json",
    "read": "events.json",
    "graph": "plot_graph.json",
    "outline": "outline.json",
    "write": "screenplay.json",
}

# checkpoint name -> file, for dependency errors
CHECKPOINTS = {
    "chapters": "chapters.json",
    "events": "events.json",
    "arcs": "arcs.json",
    "plot_graph": "plot_graph.json",
    "outline": "outline.json",
}


@dataclass
class RunContext:
    cfg: Config
    out: Path
    backend: Backend | None = None
    messages: list[str] = field(default_factory=list)

    @property
    def fingerprint(self) -> str:
        return self.cfg.fingerprint()

    def get_backend(self) -> Backend:
        if self.backend is None:
            set_template_dir(self.cfg.templates or None)
            self.backend = make_backend(self.cfg.backend_config())
        return self.backend

    def report(self, msg: str) -> None:
        log.info(msg)
        self.messages.append(msg)


def _need(ctx: RunContext, name: str) -> dict:
    path = ctx.out / CHECKPOINTS[name]
    if not path.is_file():
        raise MissingCheckpoint(name, str(path))
    return read_checkpoint(path)


def load_chapters(ctx: RunContext) -> Novel:
    return Novel.from_dict(_need(ctx, "chapters"), ctx.cfg.chars_per_token)


def load_events(ctx: RunContext) -> list[PlotEvent]:
    doc = _need(ctx, "events")
    return sorted((PlotEvent.from_dict(e) for e in doc["events"]), key=lambda e: e.sort_key)


def load_arcs(ctx: RunContext) -> list[CharacterArc]:
    return [CharacterArc.from_dict(a) for a in _need(ctx, "arcs")["arcs"]]


def load_graph(ctx: RunContext) -> PlotGraph:
    graph = PlotGraph.from_dict(_need(ctx, "plot_graph"))
    if not graph.acyclic:
        # a hand edit broke the DAG claim; rebuild rather than refuse
        ctx.report("plot_graph.json is not a valid DAG after editing; re-running cycle breaking")
        graph, _ = assemble_plot_graph(list(graph.events.values()), list(graph.edges))
    return graph


def load_outline(ctx: RunContext) -> Outline:
    return Outline.from_dict(_need(ctx, "outline"))


# -- stages ------------------------------------------------------------------


def stage_ingest(ctx: RunContext, novel_path: str | None = None) -> Novel:
    path = novel_path or ctx.cfg.novel
    if not path:
        raise MissingCheckpoint("novel")
    novel = load_novel(path, ctx.cfg.title or None, ctx.cfg.chars_per_token)
    write_checkpoint(ctx.out / "chapters.json", "chapters", novel.to_dict(), ctx.fingerprint)
    ctx.report(f"ingest: {len(novel.chapters)} chapters from {path}")
    return novel


def stage_read(ctx: RunContext) -> tuple[list[PlotEvent], list[CharacterArc]]:
    novel = load_chapters(ctx)
    events, arcs, trace = read_novel(
        novel, ctx.cfg.window(), ctx.cfg.refine(), ctx.get_backend(), ctx.cfg.generation(),
        checkpoint_dir=ctx.out, fingerprint=ctx.fingerprint,
    )
    write_checkpoint(ctx.out / "events.json", "events", {"events": [e.to_dict() for e in events]}, ctx.fingerprint)
    write_checkpoint(ctx.out / "arcs.json", "arcs", {"arcs": [a.to_dict() for a in arcs]}, ctx.fingerprint)
    write_trace(ctx.out / "read_trace.jsonl", trace, "read")
    partial = ctx.out / "events.partial.json"
    if partial.exists():
        partial.unlink()
    ctx.report(f"read: {len(events)} events, {len(arcs)} characters, {len(trace)} refinement rounds")
    return events, arcs


def _edge_list(edges: list[CausalEdge]) -> list[dict]:
    return [e.to_dict() for e in edges]


def stage_graph(ctx: RunContext) -> PlotGraph:
    novel = load_chapters(ctx)
    events = load_events(ctx)
    rel = extract_relations(
        events, [c.text for c in novel.chapters], ctx.get_backend(), ctx.cfg.max_relation_passes,
        novel.title, ctx.cfg.budget_tokens, ctx.cfg.chars_per_token, ctx.cfg.generation(),
    )
    graph, stats = assemble_plot_graph(events, rel.edges)
    dropped = {reason: _edge_list(edges) for reason, edges in stats.dropped.items()}
    dropped["unknown_event"] = _edge_list(rel.dropped)
    write_checkpoint(ctx.out / "edges_raw.json", "edges_raw",
                     {"passes": rel.passes, "edges": _edge_list(rel.edges), "dropped": _edge_list(rel.dropped)},
                     ctx.fingerprint)
    body = graph.to_dict()
    body["stats"] = {**stats.summary(), "unknown_event": len(rel.dropped)}
    body["dropped"] = dropped
    write_checkpoint(ctx.out / "plot_graph.json", "plot_graph", body, ctx.fingerprint)
    (ctx.out / "plot_graph.dot").write_text(to_dot(graph), encoding="utf-8")
    for e in rel.dropped:
        ctx.report(f"graph: dropped edge {e.from_event} -> {e.to_event} (unknown event)")
    ctx.report(f"graph: {len(graph.events)} events, {len(graph.edges)} edges kept after {rel.passes} passes")
    return graph


def stage_outline(ctx: RunContext) -> Outline:
    novel = load_chapters(ctx)
    graph = load_graph(ctx)
    arcs = load_arcs(ctx)
    outline = generate_outline(
        graph, arcs, ctx.cfg.traversal, ctx.get_backend(), ctx.cfg.refine(), ctx.cfg.generation(),
        title=novel.title, novel=novel, target_scenes=ctx.cfg.scenes,
        token_budget=ctx.cfg.budget_tokens, chars_per_token=ctx.cfg.chars_per_token,
    )
    write_checkpoint(ctx.out / "outline.json", "outline", outline.to_dict(), ctx.fingerprint)
    write_trace(ctx.out / "outline_trace.jsonl", outline.trace, "outline")
    ctx.report(f"outline: {len(outline.plans)} scene plans ({outline.traversal_mode})")
    return outline


def stage_write(ctx: RunContext):
    outline = load_outline(ctx)
    novel = load_chapters(ctx)
    graph = load_graph(ctx)
    scenes = write_scenes(
        outline, graph, novel, ctx.get_backend(), ctx.cfg.refine(), ctx.cfg.generation(),
        ctx.cfg.budget_tokens, ctx.cfg.chars_per_token, checkpoint_dir=ctx.out, fingerprint=ctx.fingerprint,
    )
    for s in scenes:
        write_trace(ctx.out / "scenes" / f"scene_{s.index:03d}.trace.jsonl", s.trace, f"scene-{s.index:03d}")
    meta = {
        "title": novel.title,
        "source_title": novel.title,
        "backend": ctx.cfg.backend,
        "model": ctx.cfg.model if ctx.cfg.backend != "mock" else "mock",
        "fingerprint": ctx.fingerprint,
        "goal_unmet": [s.index for s in scenes if s.goal_unmet],
    }
    sp = assemble_screenplay(outline, scenes, meta)
    write_checkpoint(ctx.out / "screenplay.json", "screenplay", sp.to_dict(), ctx.fingerprint)
    (ctx.out / "screenplay.fountain").write_text(emit_fountain(sp), encoding="utf-8")
    ctx.report(f"write: {len(sp.scenes)} scenes")
    return sp


STAGE_FUNCS: dict[str, Callable[[RunContext], object]] = {
    "read": stage_read,
    "graph": stage_graph,
    "outline": stage_outline,
    "write": stage_write,
}


def run_stage(ctx: RunContext, stage: str, novel_path: str | None = None) -> object:
    """Run one stage, wrapping library failures in :class:`StageError`."""
    ctx.out.mkdir(parents=True, exist_ok=True)
    try:
        if stage == "ingest":
            return stage_ingest(ctx, novel_path)
        return STAGE_FUNCS[stage](ctx)
    except (MissingCheckpoint, StageError, ConfigError):
        raise
    except (PlotloomError, ValueError, KeyError, OSError) as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}", checkpoint=_last_checkpoint(ctx, stage)) from exc


def _last_checkpoint(ctx: RunContext, stage: str) -> str | None:
    partial = ctx.out / "events.partial.json"
    if stage == "read" and partial.exists():
        return str(partial)
    if stage == "write":
        done = sorted((ctx.out / "scenes").glob("scene_*.json")) if (ctx.out / "scenes").is_dir() else []
        if done:
            return str(done[-1])
    return None


def completed(out: Path, stage: str) -> bool:
    return (out / STAGE_OUTPUT[stage]).is_file()


def existing_fingerprints(out: Path) -> dict[str, str]:
    found = {}
    for name in STAGE_OUTPUT.values():
        path = out / name
        if path.is_file():
            try:
                found[name] = read_checkpoint(path).get("fingerprint", "")
            except (ValueError, OSError):
                found[name] = ""
    return found


def run_all(ctx: RunContext, novel_path: str | None = None, resume: bool = False) -> None:
    for stage in STAGES:
        if resume and completed(ctx.out, stage):
            ctx.report(f"{stage}: checkpoint present, skipped")
            continue
        run_stage(ctx, stage, novel_path)


__all__ = [
    "STAGES", "RunContext", "run_stage", "run_all", "completed", "existing_fingerprints",
    "load_chapters", "load_events", "load_arcs", "load_graph", "load_outline",
]
