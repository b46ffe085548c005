import json
import sys

import pytest

from conftest import FIXTURES, edge, make_events, mock
from plotloom.corpus import load_novel
from plotloom.errors import CountMismatch, InvalidSlugline, UnknownEventId
from plotloom.llmio import MockBackend
from plotloom.plotgraph import CausalEdge, PlotEvent
from plotloom.reader import build_plot_graph
from plotloom.refine import RefineConfig
from plotloom.rewriter import (
    Outline,
    Scene,
    ScenePlan,
    Screenplay,
    assemble_screenplay,
    emit_fountain,
    generate_outline,
    generate_scene,
    scene_context,
    screenplay_from_fountain,
    write_scenes,
)

sys.path.insert(0, str(FIXTURES))
import make_script  # noqa: E402


def _fixture_graph():
    events = [PlotEvent.from_dict(dict(d, chapter=ch, seq=s), f"c{ch:02d}-e{s:02d}")
              for ch, evs in enumerate(make_script.EVENTS) for s, d in enumerate(evs)]
    edges = [CausalEdge.from_dict(dict(r, order=k))
             for k, r in enumerate(make_script.RELATIONS[0] + make_script.RELATIONS[1])]
    return build_plot_graph(events, edges)


def _fixture_backend():
    return MockBackend.from_file(FIXTURES / "novella.script.json")


def _plan(i, events=(), goal="g"):
    return ScenePlan(i, f"story {i}", goal, "INT. ROOM - DAY", "", tuple(events))


# -- outline -----------------------------------------------------------------


def test_outline_fixture_fixes_unknown_event():
    b = _fixture_backend()
    ol = generate_outline(_fixture_graph(), [], "bft", b, RefineConfig(), title="novella")
    assert len(ol.plans) == 4 and [p.index for p in ol.plans] == [0, 1, 2, 3]
    assert ol.plans[2].source_events == ("c01-e00", "c01-e01")
    assert len(ol.trace) == 2 and len(b.calls_for("outline.refine")) == 1
    assert ol.core_elements["theme"] == "duty against inheritance"
    assert ol.structure["acts"] == ["discovery", "revelation", "defiance"]
    assert ol.traversal_mode == "bft"


def _outline_backend(plans, *extra):
    return mock(("outline.core", {"theme": "t", "premise": "p"}),
                ("outline.structure", {"label": "l", "acts": ["a"]}),
                ("outline.plans", {"plans": plans}), *extra)


def test_outline_unknown_event_survives_raises():
    plans = [{"goal": "g", "source_events": ["e1", "zz"]}]
    b = _outline_backend(plans, ("outline.locate", {"issues": []}), ("outline.refine", {"items": []}))
    with pytest.raises(UnknownEventId) as ei:
        generate_outline(build_plot_graph(make_events(2), []), [], "bft", b, RefineConfig(max_rounds=1))
    assert ei.value.ids == ["zz"]


def test_outline_order_follows_traversal():
    # e3 (chapter 2) causes e2 (chapter 1): BFT puts e3 before e2, CHAPTER does not
    g = build_plot_graph(make_events(3), [edge("e3", "e2")])
    prompts = {}
    for mode in ("bft", "chapter"):
        b = _outline_backend([{"goal": "g"}], ("outline.locate", {"issues": []}))
        ol = generate_outline(g, [], mode, b, RefineConfig())
        assert ol.traversal_mode == mode
        text = b.calls_for("outline.core")[0].user_prompt
        prompts[mode] = [line.split(" |")[0] for line in text.splitlines() if line.startswith("e") and " | " in line]
    assert prompts["bft"] == ["e1", "e3", "e2"]
    assert prompts["chapter"] == ["e1", "e2", "e3"]


def test_outline_scene_target_enforced():
    b = mock(("outline.core", {"theme": "t", "premise": "p"}),
             ("outline.structure", {"label": "l", "acts": ["a"]}),
             ("outline.plans", {"plans": [{"goal": "g"}]}),
             ("outline.plans:repair", {"plans": [{"goal": "g"}, {"goal": "h"}]}),
             ("outline.locate", {"issues": []}))
    ol = generate_outline(build_plot_graph(make_events(1), []), [], "dft", b, RefineConfig(), target_scenes=2)
    assert [p.goal for p in ol.plans] == ["g", "h"]


def test_outline_round_trip():
    ol = Outline({"theme": "t"}, {"acts": ["a"]}, [_plan(0, ["e1"]), _plan(1)], "dft")
    assert Outline.from_dict(json.loads(json.dumps(ol.to_dict()))) == ol


def test_outline_rejects_gaps():
    with pytest.raises(ValueError):
        Outline({}, {}, [_plan(1)])
    with pytest.raises(ValueError):
        Outline({}, {}, [])


# -- scene context -----------------------------------------------------------


def test_context_first_scene_has_no_previous():
    g = _fixture_graph()
    nov = load_novel(FIXTURES / "novella.txt")
    ctx = scene_context(_plan(0, ["c00-e00"]), g, nov, None)
    assert "Previous scene" not in ctx and "c00-e00" in ctx
    assert nov.chapters[0].text in ctx


def test_context_chapter_once_and_previous_scene():
    g = _fixture_graph()
    nov = load_novel(FIXTURES / "novella.txt")
    prev = Scene(0, "INT. ROOM - DAY", "prior body", 0)
    ctx = scene_context(_plan(1, ["c01-e00", "c01-e01"]), g, nov, prev)
    assert ctx.count("## Chapter 1") == 1
    assert ctx.endswith("## Previous scene\nINT. ROOM - DAY\n\nprior body")


def test_context_tight_budget_cuts_chapter_text_only():
    g = _fixture_graph()
    nov = load_novel(FIXTURES / "novella.txt")
    prev = Scene(0, "INT. ROOM - DAY", "prior body", 0)
    ctx = scene_context(_plan(1, ["c01-e00"]), g, nov, prev, budget=120)
    assert g.events["c01-e00"].description in ctx and "prior body" in ctx
    assert nov.chapters[1].text not in ctx


# -- scenes ------------------------------------------------------------------

GOOD = {"slugline": "INT. ROOM - DAY", "body": "Ann waits."}


def test_scene_no_refinement_needed():
    b = mock(("scene", GOOD), ("scene.locate", {"issues": []}))
    s = generate_scene(_plan(0), "ctx", b, RefineConfig())
    assert (s.slugline, s.body, s.refinement_rounds, s.goal_unmet) == ("INT. ROOM - DAY", "Ann waits.", 0, False)


def test_scene_one_round():
    miss = {"issues": [{"target_ids": ["scene"], "kind": "MISSING", "note": "goal"}]}
    fixed = {"items": [{"id": "scene", "value": {"slugline": "INT. ROOM - DAY", "body": "Ann leaves."}}]}
    b = mock(("scene", GOOD), ("scene.locate", miss), ("scene.refine", fixed), ("scene.locate", {"issues": []}))
    s = generate_scene(_plan(0), "ctx", b, RefineConfig())
    assert s.body == "Ann leaves." and s.refinement_rounds == 1 and not s.goal_unmet


def test_scene_goal_unmet_after_budget():
    miss = {"issues": [{"target_ids": ["scene"], "kind": "MISSING", "note": "goal"}]}
    fixed = {"items": [{"id": "scene", "value": GOOD}]}
    b = mock(("scene", GOOD), *[("scene.locate", miss)] * 4, *[("scene.refine", fixed)] * 3)
    s = generate_scene(_plan(0), "ctx", b, RefineConfig(max_rounds=4))
    assert s.goal_unmet and s.refinement_rounds == 3 and len(s.trace) == 4


def test_scene_bad_slugline_repaired():
    b = mock(("scene", {"slugline": "somewhere", "body": "x"}), ("scene:repair", GOOD),
             ("scene.locate", {"issues": []}))
    assert generate_scene(_plan(0), "ctx", b, RefineConfig()).slugline == "INT. ROOM - DAY"


def test_write_scenes_sees_previous_body(tmp_path):
    ol = Outline({}, {}, [_plan(0), _plan(1), _plan(2)])
    bodies = [f"Body number {k}." for k in range(3)]
    b = mock(*[("scene", {"slugline": "INT. ROOM - DAY", "body": t}) for t in bodies],
             *[("scene.locate", {"issues": []})] * 3)
    scenes = write_scenes(ol, build_plot_graph(make_events(1), []), None, b, RefineConfig(), checkpoint_dir=tmp_path)
    prompts = [c.user_prompt for c in b.calls_for("scene")]
    for k in (1, 2):
        assert bodies[k - 1] in prompts[k]
    assert bodies[1] not in prompts[0]
    assert [s.index for s in scenes] == [0, 1, 2]
    assert sorted(p.name for p in (tmp_path / "scenes").iterdir()) == [
        "scene_000.json", "scene_001.json", "scene_002.json"]


def test_write_scenes_fixture_golden():
    b = _fixture_backend()
    ol = Outline({}, {}, [ScenePlan.from_dict(p, i) for i, p in enumerate(make_script.PLANS)])
    nov = load_novel(FIXTURES / "novella.txt")
    scenes = write_scenes(ol, _fixture_graph(), nov, b, RefineConfig())
    assert [s.refinement_rounds for s in scenes] == [0, 1, 0, 0]
    assert scenes[1].body == make_script.SCENE_1_REFINED["body"]
    assert scenes[2].slugline == make_script.SCENE_2_REPAIRED["slugline"]


# -- assembly ----------------------------------------------------------------


def _scenes(n):
    return [Scene(i, "INT. ROOM - DAY", f"Line {i}.", i) for i in range(n)]


def test_assemble_count_mismatch():
    ol = Outline({}, {}, [_plan(0), _plan(1)])
    with pytest.raises(CountMismatch):
        assemble_screenplay(ol, _scenes(1), {})


def test_assemble_orders_by_plan_and_keeps_meta():
    ol = Outline({}, {}, [_plan(0), _plan(1)], "dft")
    sp = assemble_screenplay(ol, list(reversed(_scenes(2))), {"title": "T", "seed": 3})
    assert [s.plan_index for s in sp.scenes] == [0, 1]
    assert sp.title == "T" and sp.metadata == {"seed": 3} and sp.traversal_mode == "dft"
    assert Screenplay.from_dict(json.loads(json.dumps(sp.to_dict()))) == sp


def test_assemble_invalid_slugline():
    ol = Outline({}, {}, [_plan(0), _plan(1)])
    sc = _scenes(2)
    sc[1].slugline = "somewhere, later"
    with pytest.raises(InvalidSlugline) as ei:
        assemble_screenplay(ol, sc, {})
    assert ei.value.indices == [1]


def test_emit_rejects_bad_slugline():
    sp = Screenplay("T", [Scene(0, "somewhere, later", "x", 0)], "bft")
    with pytest.raises(InvalidSlugline) as ei:
        emit_fountain(sp)
    assert ei.value.indices == [0]


def test_emit_fixture_golden():
    scenes = [make_script.SCENES[0], make_script.SCENE_1_REFINED, make_script.SCENE_2_REPAIRED,
              make_script.SCENES[3]]
    sp = Screenplay("novella", [Scene(i, s["slugline"], s["body"], i) for i, s in enumerate(scenes)], "bft",
                    {"source_title": "novella"})
    assert emit_fountain(sp) == (FIXTURES / "novella.fountain").read_text(encoding="utf-8")


def test_fountain_round_trip_fixpoint():
    text = (FIXTURES / "novella.fountain").read_text(encoding="utf-8")
    sp = screenplay_from_fountain(text, "bft")
    assert emit_fountain(sp) == text
    assert sp.title == "novella" and sp.metadata["source_title"] == "novella" and len(sp.scenes) == 4
