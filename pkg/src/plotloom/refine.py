"""Hallucination-aware refinement loop.

Each round asks the model to locate issues in the current artifact, pulls the
located items plus the chapters they cite into a context block, asks for
replacement items and merges them back by id. The loop stops on a clean
round or when the round budget runs out.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Mapping, NamedTuple

from pydantic import BaseModel, field_validator, model_validator

from .corpus import DEFAULT_CHARS_PER_TOKEN, _max_chars, estimate_tokens
from .errors import MergeConflict, PlotloomError
from .llmio import Backend, ChatRequest, ask_structured
from .plotgraph import EVENT_ID_RE

log = logging.getLogger(__name__)


class IssueKind(str, enum.Enum):
    MISSING = "MISSING"
    INCONSISTENT = "INCONSISTENT"
    UNALIGNED = "UNALIGNED"


@dataclass(frozen=True)
class IssueLocation:
    target_ids: tuple[str, ...]
    kind: IssueKind
    note: str = ""
    chapter_hint: int | None = None

    def __post_init__(self) -> None:
        if self.kind is not IssueKind.MISSING and not self.target_ids:
            raise ValueError(f"{self.kind.value} issues must name at least one target id")

    def to_dict(self) -> dict:
        return {"target_ids": list(self.target_ids), "kind": self.kind.value,
                "note": self.note, "chapter_hint": self.chapter_hint}


@dataclass(frozen=True)
class RefinedItem:
    id: str
    value: Any
    new: bool = False


@dataclass
class RefinementRound:
    round: int
    locations: list[IssueLocation]
    suggestions: list[str]
    context: str
    refined_items: list[RefinedItem] = field(default_factory=list)
    adopted: int = 0
    unknown_ids: list[str] = field(default_factory=list)
    repair_calls: int = 0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "issues": len(self.locations),
            "suggestions": self.suggestions,
            "refined": len(self.refined_items),
            "adopted": self.adopted,
            "adoption_rate": (self.adopted / len(self.refined_items)) if self.refined_items else None,
            "locations": [loc.to_dict() for loc in self.locations],
            "unknown_ids": self.unknown_ids,
            "refined_items": [{"id": r.id, "new": r.new, "value": r.value} for r in self.refined_items],
            "repair_calls": self.repair_calls,
            "context": self.context,
        }


@dataclass(frozen=True)
class RefineConfig:
    max_rounds: int = 4
    stop_on_zero_issues: bool = True

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")


@dataclass(frozen=True)
class SupportCorpus:
    """What a located issue can be resolved against.

    ``items`` holds the artifact being refined (swapped in every round),
    ``records`` any other addressable values such as plot events, and
    ``chapters`` the source text by chapter index.
    """

    chapters: Mapping[int, str]
    items: Mapping[str, Any] = field(default_factory=dict)
    records: Mapping[str, Any] = field(default_factory=dict)
    token_budget: int = 8192
    chars_per_token: float = DEFAULT_CHARS_PER_TOKEN


class RetrievedContext(NamedTuple):
    text: str
    unknown_ids: list[str]


# -- wire schemas ------------------------------------------------------------


class _IssueModel(BaseModel):
    target_ids: list[str] = []
    kind: Literal["MISSING", "INCONSISTENT", "UNALIGNED"]
    note: str = ""
    suggestion: str = ""
    chapter_hint: int | None = None

    @field_validator("kind", mode="before")
    @classmethod
    def _upper(cls, v: Any) -> Any:
        return v.strip().upper() if isinstance(v, str) else v

    @model_validator(mode="after")
    def _targets(self) -> "_IssueModel":
        if self.kind != "MISSING" and not self.target_ids:
            raise ValueError("target_ids must be non-empty unless kind is MISSING")
        return self


class FeedbackPayload(BaseModel):
    issues: list[_IssueModel]


class _RefinedModel(BaseModel):
    id: str
    new: bool = False
    value: dict[str, Any]


class RefinePayload(BaseModel):
    items: list[_RefinedModel]


# -- retrieval and merge -----------------------------------------------------


def _render_record(item_id: str, value: Any) -> str:
    return f"[{item_id}] {json.dumps(value, ensure_ascii=False, sort_keys=True)}"


def _chapters_of(item_id: str, value: Any) -> list[int]:
    found = [int(m.group(1)) for m in EVENT_ID_RE.finditer(item_id)]
    if isinstance(value, Mapping) and isinstance(value.get("chapter"), int):
        found.append(value["chapter"])
    found.extend(int(m.group(1)) for m in EVENT_ID_RE.finditer(json.dumps(value, ensure_ascii=False)))
    return found


def retrieve_context(
    locations: IssueLocation | Iterable[IssueLocation], support: SupportCorpus
) -> RetrievedContext:
    """Collect the located items and the chapters they cite.

    Located records are always included whole; chapter text fills whatever
    token budget is left, in chapter order. Ids that resolve nowhere are
    reported and a location made only of unknown ids is skipped.
    """
    if isinstance(locations, IssueLocation):
        locations = [locations]
    records: dict[str, Any] = {}
    unknown: list[str] = []
    chapters: list[int] = []
    for loc in locations:
        known_here = []
        for tid in loc.target_ids:
            if tid in support.items:
                records.setdefault(tid, support.items[tid])
                known_here.append(tid)
            elif tid in support.records:
                records.setdefault(tid, support.records[tid])
                known_here.append(tid)
            elif tid not in unknown:
                unknown.append(tid)
        if loc.target_ids and not known_here:
            log.warning("skipping issue location with only unknown ids: %s", ", ".join(loc.target_ids))
            continue
        for tid in known_here:
            chapters.extend(_chapters_of(tid, records[tid]))
        if loc.chapter_hint is not None:
            chapters.append(loc.chapter_hint)

    parts = []
    if records:
        parts.append("## Located items\n" + "\n".join(_render_record(k, v) for k, v in records.items()))
    cpt = support.chars_per_token
    remaining = support.token_budget - sum(estimate_tokens(p, cpt) for p in parts)
    for ch in sorted(set(chapters)):
        if ch not in support.chapters:
            continue
        header = f"## Chapter {ch}\n"
        room = _max_chars(remaining, cpt) - len(header)
        if room <= 0:
            break
        block = header + support.chapters[ch][:room]
        parts.append(block)
        remaining -= estimate_tokens(block, cpt)
    return RetrievedContext("\n\n".join(parts), unknown)


def merge_items(items: Mapping[str, Any], refined: Iterable[RefinedItem]) -> tuple[dict[str, Any], int]:
    """Replace items by id and append genuinely new ones.

    Untouched items keep their identity. Returns the merged mapping and the
    number of items whose value actually changed.
    """
    merged = dict(items)
    adopted = 0
    for r in refined:
        if r.id in merged:
            if merged[r.id] != r.value:
                merged[r.id] = r.value
                adopted += 1
        elif r.new:
            merged[r.id] = r.value
            adopted += 1
        else:
            raise MergeConflict(f"refined item {r.id!r} is unknown and not flagged new")
    return merged, adopted


# -- the loop ----------------------------------------------------------------

LocateFn = Callable[[Mapping[str, Any], int], ChatRequest]
RefineFn = Callable[[Mapping[str, Any], list[IssueLocation], list[str], str, int], ChatRequest]


@dataclass
class RefineHooks:
    locate: LocateFn
    refine: RefineFn
    retrieve: Callable[[list[IssueLocation], SupportCorpus], RetrievedContext] = retrieve_context
    merge: Callable[[Mapping[str, Any], list[RefinedItem]], tuple[dict[str, Any], int]] = merge_items
    # raise SchemaViolation for a refined (id, value) the stage cannot accept
    validate_item: Callable[[str, Any], None] | None = None
    # deterministic issues found without the model, added to every round
    precheck: Callable[[Mapping[str, Any]], list[tuple[IssueLocation, str]]] | None = None


def _count_repairs(backend: Backend, before: int) -> int:
    calls = getattr(backend, "calls", None)
    if calls is None:
        return 0
    return sum(1 for c in calls[before:] if c.tag.endswith(":repair"))


def _item_checker(validate: Callable[[str, Any], None]) -> Callable[[RefinePayload], None]:
    def check(payload: RefinePayload) -> None:
        for it in payload.items:
            validate(it.id, it.value)
    return check


def har_refine(
    x0: Mapping[str, Any],
    support: SupportCorpus,
    backend: Backend,
    cfg: RefineConfig,
    hooks: RefineHooks,
) -> tuple[dict[str, Any], list[RefinementRound]]:
    items = dict(x0)
    rounds: list[RefinementRound] = []
    for t in range(cfg.max_rounds):
        mark = len(getattr(backend, "calls", ()))
        try:
            feedback = ask_structured(backend, hooks.locate(items, t), FeedbackPayload).value
        except PlotloomError as exc:
            exc.har_round = t
            raise
        located = [
            (IssueLocation(tuple(i.target_ids), IssueKind(i.kind), i.note, i.chapter_hint), i.suggestion or i.note)
            for i in feedback.issues
        ]
        if hooks.precheck is not None:
            seen = {(loc.kind, loc.target_ids) for loc, _ in located}
            located += [(loc, sug) for loc, sug in hooks.precheck(items) if (loc.kind, loc.target_ids) not in seen]

        ctx = hooks.retrieve([loc for loc, _ in located], replace(support, items=items))
        unknown = set(ctx.unknown_ids)
        actionable = [
            (loc, sug) for loc, sug in located
            if not loc.target_ids or any(tid not in unknown for tid in loc.target_ids)
        ]
        locations = [loc for loc, _ in actionable]
        suggestions = [sug for _, sug in actionable]
        rnd = RefinementRound(t, locations, suggestions, ctx.text, unknown_ids=list(ctx.unknown_ids))
        rounds.append(rnd)

        if (cfg.stop_on_zero_issues and not locations) or t + 1 >= cfg.max_rounds:
            rnd.repair_calls = _count_repairs(backend, mark)
            break

        req = hooks.refine(items, locations, suggestions, ctx.text, t)
        check = _item_checker(hooks.validate_item) if hooks.validate_item is not None else None

        try:
            payload = ask_structured(backend, req, RefinePayload, check).value
            refined = [RefinedItem(it.id, it.value, it.new) for it in payload.items]
            items, adopted = hooks.merge(items, refined)
        except PlotloomError as exc:
            exc.har_round = t
            raise
        rnd.refined_items = refined
        rnd.adopted = adopted
        rnd.repair_calls = _count_repairs(backend, mark)
        log.info("refinement round %d: %d issues, %d refined, %d adopted", t, len(locations), len(refined), adopted)
    return items, rounds


def unresolved(rounds: list[RefinementRound]) -> bool:
    """True when the last round still located issues, i.e. the budget ran out."""
    return bool(rounds) and bool(rounds[-1].locations)


def write_trace(path: str | Path, rounds: Iterable[RefinementRound], stage: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rounds:
            row = r.to_dict()
            if stage:
                row = {"stage": stage, **row}
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def format_locations(locations: list[IssueLocation], suggestions: list[str]) -> str:
    lines = []
    for i, (loc, sug) in enumerate(zip(locations, suggestions), 1):
        targets = ", ".join(loc.target_ids) or f"chapter {loc.chapter_hint}"
        lines.append(f"{i}. [{loc.kind.value}] {targets}: {loc.note}\n   suggestion: {sug}")
    return "\n".join(lines)


def render_items(items: Mapping[str, Any]) -> str:
    return "\n".join(_render_record(k, v) for k, v in items.items())
