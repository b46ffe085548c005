from hypothesis import given, settings
from hypothesis import strategies as st

from plotloom.fountain import (
    Action,
    Dialogue,
    FountainDocument,
    FountainScene,
    emit_document,
    format_body,
    is_slugline,
    normalize_slugline,
    parse_body,
    parse_fountain,
)


def test_slugline_forms():
    for ok in ("INT. HOUSE - DAY", "EXT. BEACH - NIGHT", "int. kitchen", "INT./EXT. CAR - DAY", "I/E BUS"):
        assert is_slugline(ok), ok
    for bad in ("somewhere, later", "The beach at dawn", "INTERIOR HOUSE", "INT.", ""):
        assert not is_slugline(bad), bad


def test_normalize_slugline():
    assert normalize_slugline("  int.  lamp room -  night ") == "INT. LAMP ROOM - NIGHT"


def test_parse_action_and_dialogue():
    body = "Rain falls.\n\nMARA\n(quietly)\nNot yet.\n\nTOM: Now."
    assert parse_body(body) == [
        Action("Rain falls."),
        Dialogue("MARA", ("(quietly)", "Not yet.")),
        Dialogue("TOM", ("Now.",)),
    ]


def test_all_caps_single_line_is_action():
    assert parse_body("BANG.") == [Action("BANG.")]


def test_format_indents_dialogue():
    assert format_body([Dialogue("ANN", ("Hi.",))]) == "ANN\n    Hi."


def test_action_that_looks_like_cue_is_forced():
    el = [Action("LOUD NOISES\nfrom the hall.")]
    text = format_body(el)
    assert text.startswith("!") and parse_body(text) == el


def test_lowercase_name_forced_cue():
    el = [Dialogue("McGee", ("Hey.",))]
    assert parse_body(format_body(el)) == [Dialogue("MCGEE", ("Hey.",))]


def test_action_only_scene():
    doc = FountainDocument({"Title": "T"}, [FountainScene("INT. ROOM - DAY", "Nothing is said.")])
    text = emit_document(doc)
    assert text == "Title: T\n\nINT. ROOM - DAY\n\nNothing is said.\n"
    assert parse_fountain(text) == doc


def test_document_without_title_page():
    doc = FountainDocument({}, [FountainScene("EXT. YARD - DAY", "")])
    assert emit_document(doc) == "EXT. YARD - DAY\n"
    assert parse_fountain("EXT. YARD - DAY\n").scenes == doc.scenes


_words = st.text(alphabet=st.sampled_from("abcdefgh ABC.,!?'"), min_size=1, max_size=25).filter(
    lambda s: s.strip() == s and s)
_action = st.builds(Action, st.lists(_words, min_size=1, max_size=3).map("\n".join))
_dialogue = st.builds(Dialogue, st.sampled_from(["ANN", "BO", "DR. KAY", "MARA (V.O.)"]),
                      st.lists(_words, min_size=1, max_size=3).map(tuple))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(_action, _dialogue), min_size=1, max_size=6))
def test_body_round_trip(elements):
    text = format_body(elements)
    parsed = parse_body(text)
    assert format_body(parsed) == text
    assert parse_body(format_body(parsed)) == parsed


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["INT. A - DAY", "EXT. B - NIGHT"]),
                          st.lists(st.one_of(_action, _dialogue), max_size=4)), min_size=1, max_size=4))
def test_document_emit_is_fixpoint(scenes):
    doc = FountainDocument({"Title": "X"}, [FountainScene(s, format_body(b)) for s, b in scenes])
    text = emit_document(doc)
    assert emit_document(parse_fountain(text)) == text
