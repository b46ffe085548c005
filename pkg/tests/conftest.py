import random
from pathlib import Path

import pytest

from plotloom.llmio import MockBackend
from plotloom.plotgraph import CausalEdge, PlotEvent, Strength

FIXTURES = Path(__file__).parent / "fixtures"


def make_events(n, chapters=None):
    """n events, event i in chapter ``chapters[i]`` (default: chapter i)."""
    out = []
    for i in range(n):
        ch = i if chapters is None else chapters[i]
        out.append(PlotEvent(f"e{i + 1}", "", "", f"event {i + 1}", (), ch, i))
    return out


def edge(a, b, s="HIGH", order=0, desc=""):
    return CausalEdge(a, b, desc, Strength.parse(s), order)


def random_multigraph(rng: random.Random, max_nodes=8, max_edges=20):
    n = rng.randint(1, max_nodes)
    events = make_events(n)
    ids = [e.id for e in events]
    edges = [
        CausalEdge(rng.choice(ids), rng.choice(ids), "", rng.choice(list(Strength)), k)
        for k in range(rng.randint(0, max_edges))
    ]
    return events, edges


def random_dag(rng: random.Random, max_nodes=8, max_edges=20):
    """Forward-only edges over a random topological order; no parallel pairs."""
    n = rng.randint(1, max_nodes)
    events = make_events(n)
    ids = [e.id for e in events]
    rng.shuffle(ids)
    pairs = [(ids[i], ids[j]) for i in range(n) for j in range(i + 1, n)]
    rng.shuffle(pairs)
    chosen = pairs[: rng.randint(0, min(max_edges, len(pairs)))]
    edges = [CausalEdge(a, b, "", rng.choice(list(Strength)), k) for k, (a, b) in enumerate(chosen)]
    return events, edges


def mock(*entries):
    """MockBackend from (tag, response) pairs; ordinals assigned per tag in order."""
    counts: dict[str, int] = {}
    rows = []
    for tag, resp in entries:
        rows.append({"tag": tag, "ordinal": counts.get(tag, 0), "response": resp})
        counts[tag] = counts.get(tag, 0) + 1
    return MockBackend.from_entries(rows)


@pytest.fixture
def novella_path():
    return FIXTURES / "novella.txt"


@pytest.fixture
def script_path():
    return FIXTURES / "novella.script.json"


# acceptance criteria record their outcome here; printed after the run
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {name}")
