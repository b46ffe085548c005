import json
import sys

import pytest

from conftest import FIXTURES, edge, make_events, mock
from plotloom.corpus import Chapter, Novel, WindowConfig, build_window, estimate_tokens, load_novel
from plotloom.errors import SchemaViolation, StageError
from plotloom.llmio import MockBackend
from plotloom.plotgraph import CharacterArc, Strength, is_acyclic
from plotloom.reader import (
    assemble_plot_graph,
    build_plot_graph,
    extract_relations,
    extract_window_arcs,
    extract_window_events,
    read_novel,
)
from plotloom.refine import RefineConfig

sys.path.insert(0, str(FIXTURES))
import make_script  # noqa: E402


def _novel(n):
    return Novel("N", tuple(Chapter(i, f"Chapter {i}", f"text {i}.", estimate_tokens(f"text {i}.")) for i in range(n)))


def _window(n=3, focus=0):
    return build_window(_novel(n), focus, [], WindowConfig())


# -- events ------------------------------------------------------------------


def test_event_ids_from_focus_chapter():
    b = mock(("extract_events", {"events": [{"description": "a"}, {"description": "b"}]}))
    evs = extract_window_events(_window(focus=0), b)
    assert [e.id for e in evs] == ["c00-e00", "c00-e01"]
    assert [(e.chapter, e.seq) for e in evs] == [(0, 0), (0, 1)]


def test_empty_extraction_is_fine():
    assert extract_window_events(_window(), mock(("extract_events", {"events": []}))) == []


def test_missing_description_names_field():
    bad = {"events": [{"place_time": "x"}]}
    b = mock(("extract_events", bad), ("extract_events:repair", bad))
    with pytest.raises(SchemaViolation) as ei:
        extract_window_events(_window(), b)
    assert ei.value.field == "description"


def test_prompt_carries_focus_and_digest():
    nov = _novel(3)
    prior = make_events(1)
    w = build_window(nov, 1, prior, WindowConfig())
    b = mock(("extract_events", {"events": []}))
    extract_window_events(w, b)
    prompt = b.calls[0].user_prompt
    assert "text 1." in prompt and "e1 |  | event 1" in prompt and "text 2." in prompt


# -- arcs --------------------------------------------------------------------


def test_arcs_new_character_joins():
    prior = [CharacterArc.from_dict({"character": "Ann", "biography": [{"event_id": "c00-e00", "experience": "x"}]})]
    cal = {"character": "Cal", "biography": [{"event_id": "c02-e00", "experience": "y"}]}
    b = mock(("extract_arcs", {"arcs": [cal]}))
    arcs = {a.character: a for a in extract_window_arcs(_window(focus=2), prior, b)}
    assert arcs["Ann"].to_dict() == prior[0].to_dict()
    assert arcs["Cal"].biography[0].experience == "y"


def test_arcs_relation_symmetrized():
    b = mock(("extract_arcs", {"arcs": [{"character": "A", "relations": [{"other": "B", "description": "rivals"}]}]}))
    arcs = {a.character: a for a in extract_window_arcs(_window(), [], b)}
    assert arcs["B"].relations[0].other == "A" and arcs["B"].relations[0].description == "rivals"


def test_arcs_duplicate_biography_once():
    entry = {"character": "A", "biography": [{"event_id": "c00-e00", "experience": "same"}]}
    b = mock(("extract_arcs", {"arcs": [entry]}), ("extract_arcs", {"arcs": [entry]}))
    arcs = extract_window_arcs(_window(), [], b)
    arcs = extract_window_arcs(_window(), arcs, b)
    assert len(arcs[0].biography) == 1


# -- read_novel --------------------------------------------------------------


def _fixture_backend():
    return MockBackend.from_file(FIXTURES / "novella.script.json")


def test_read_novel_golden():
    nov = load_novel(FIXTURES / "novella.txt")
    b = _fixture_backend()
    events, arcs, trace = read_novel(nov, WindowConfig(), RefineConfig(), b)
    expected = [dict(d, id=f"c{ch:02d}-e{s:02d}", chapter=ch, seq=s)
                for ch, evs in enumerate(make_script.EVENTS) for s, d in enumerate(evs)]
    expected[3] = dict(make_script.FIXED_TOM, id="c01-e01")
    assert [e.to_dict() for e in events] == [dict(x, characters=list(x["characters"])) for x in expected]
    assert len(trace) == 2 and trace[0].adopted == 1
    names = sorted(a.character for a in arcs)
    assert names == ["Father", "Mara", "Tom"]
    mara = next(a for a in arcs if a.character == "Mara")
    assert [b.event_id for b in mara.biography] == ["c00-e00", "c01-e00", "c02-e00"]
    assert {r.other for r in mara.relations} == {"Father", "Tom"}
    # window k saw the events of earlier windows
    third = b.calls_for("extract_events")[2].user_prompt
    assert all(eid in third for eid in ("c00-e00", "c00-e01", "c01-e00", "c01-e01"))


def test_read_novel_deterministic():
    nov = load_novel(FIXTURES / "novella.txt")
    a = read_novel(nov, WindowConfig(), RefineConfig(), _fixture_backend())
    b = read_novel(nov, WindowConfig(), RefineConfig(), _fixture_backend())
    assert [e.to_dict() for e in a[0]] == [e.to_dict() for e in b[0]]
    assert [x.to_dict() for x in a[1]] == [x.to_dict() for x in b[1]]


def test_read_single_chapter():
    nov = _novel(1)
    b = mock(("extract_events", {"events": [{"description": "only"}]}), ("extract_arcs", {"arcs": []}),
             ("read.locate", {"issues": []}))
    events, arcs, trace = read_novel(nov, WindowConfig(), RefineConfig(), b)
    assert [e.id for e in events] == ["c00-e00"] and arcs == [] and len(trace) == 1
    assert "(none)" in b.calls_for("extract_events")[0].user_prompt


def test_read_har_fixes_arc_inconsistency():
    nov = _novel(1)
    b = mock(
        ("extract_events", {"events": [{"description": "duel"}]}),
        ("extract_arcs", {"arcs": [{"character": "A", "biography": [{"event_id": "c00-e00", "experience": "wins"}]}]}),
        ("read.locate", {"issues": [{"target_ids": ["arc:A"], "kind": "INCONSISTENT", "note": "A loses"}]}),
        ("read.refine", {"items": [{"id": "arc:A", "value": {"character": "A", "biography": [
            {"event_id": "c00-e00", "experience": "loses"}]}}]}),
        ("read.locate", {"issues": []}),
    )
    _, arcs, trace = read_novel(nov, WindowConfig(), RefineConfig(), b)
    assert arcs[0].biography[0].experience == "loses" and len(trace) == 2


def test_read_failure_writes_partial(tmp_path):
    nov = _novel(2)
    b = mock(("extract_events", {"events": [{"description": "one"}]}), ("extract_arcs", {"arcs": []}))
    with pytest.raises(StageError) as ei:
        read_novel(nov, WindowConfig(), RefineConfig(), b, checkpoint_dir=tmp_path, fingerprint="fp")
    assert ei.value.stage == "read" and ei.value.chapter == 1
    partial = json.loads((tmp_path / "events.partial.json").read_text())
    assert [e["id"] for e in partial["events"]] == ["c00-e00"] and partial["fingerprint"] == "fp"
    assert "chapter 1" in str(ei.value) and "events.partial.json" in str(ei.value)


# -- relations ---------------------------------------------------------------

EVS = make_events(5)


def rels(*pairs, strength="HIGH"):
    return {"relations": [{"from": a, "to": b, "description": f"{a}>{b}", "strength": strength} for a, b in pairs]}


def test_relations_stabilize():
    b = mock(("extract_relations", rels(("e1", "e2"), ("e2", "e3"), ("e3", "e4"))),
             ("extract_relations", rels(("e4", "e5"))),
             ("extract_relations", rels()))
    r = extract_relations(EVS, ["c"], b)
    assert (len(r.edges), r.passes) == (4, 3)
    assert [e.order for e in r.edges] == [0, 1, 2, 3]
    assert "e1 -> e2" in b.calls[1].user_prompt


def test_relations_single_empty_pass():
    r = extract_relations(EVS, [], mock(("extract_relations", rels())))
    assert (r.edges, r.passes) == ([], 1)


def test_relations_reworded_repeat_not_new():
    again = {"relations": [{"from": "e1", "to": "e2", "description": "other words", "strength": "LOW"}]}
    b = mock(("extract_relations", rels(("e1", "e2"))), ("extract_relations", again))
    r = extract_relations(EVS, [], b)
    assert r.passes == 2 and len(r.edges) == 1 and r.edges[0].description == "e1>e2"


def test_relations_cap():
    b = mock(*[("extract_relations", rels((a, c))) for a in ("e1", "e2", "e3") for c in ("e4", "e5")])
    r = extract_relations(EVS, [], b, max_passes=5)
    assert r.passes == 5 and len(b.calls) == 5


def test_relations_unknown_dropped():
    b = mock(("extract_relations", rels(("e1", "e2"), ("e1", "e99"))), ("extract_relations", rels()))
    r = extract_relations(EVS, [], b)
    assert [e.pair for e in r.edges] == [("e1", "e2")]
    assert [e.pair for e in r.dropped] == [("e1", "e99")]


def test_relations_need_two_events():
    b = mock()
    assert extract_relations(make_events(1), [], b).passes == 0 and b.calls == []


def test_relations_strength_words():
    b = mock(("extract_relations", rels(("e1", "e2"), strength="middle")), ("extract_relations", rels()))
    assert extract_relations(EVS, [], b).edges[0].strength is Strength.MEDIUM


# -- graph assembly ----------------------------------------------------------


def test_build_graph_cyclic_fixture():
    es = [edge("e1", "e2", "HIGH", 0), edge("e2", "e3", "HIGH", 1), edge("e3", "e1", "LOW", 2)]
    g, stats = assemble_plot_graph(make_events(3), es)
    assert g.acyclic and is_acyclic(g)
    assert {e.pair for e in g.edges} == {("e1", "e2"), ("e2", "e3")}
    assert stats.summary() == {"nodes": 3, "kept": 2, "dangling": 0, "self_loop": 0, "duplicate": 0, "cycle": 1}


def test_build_graph_no_edges():
    g = build_plot_graph(make_events(3), [])
    assert g.acyclic and g.edges == () and len(g.events) == 3


def test_build_graph_duplicates_and_dangling():
    es = [edge("e1", "e2", "LOW", 0), edge("e1", "e2", "HIGH", 1), edge("e1", "e1", order=2), edge("e1", "e9", order=3)]
    g, stats = assemble_plot_graph(make_events(2), es)
    assert [(e.pair, e.strength) for e in g.edges] == [(("e1", "e2"), Strength.HIGH)]
    s = stats.summary()
    assert (s["duplicate"], s["self_loop"], s["dangling"]) == (1, 1, 1)
