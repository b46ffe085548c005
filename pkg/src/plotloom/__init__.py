"""Turn a novel into a Fountain screenplay through checkpointed LLM stages."""

from .corpus import Chapter, Novel, Window, WindowConfig, build_window, load_novel, select_excerpts, split_chapters
from .errors import PlotloomError
from .plotgraph import (
    CausalEdge,
    CharacterArc,
    PlotEvent,
    PlotGraph,
    Strength,
    TraversalMode,
    break_cycles,
    is_acyclic,
    sanitize_edges,
    traverse,
)

__version__ = "0.1.0"

__all__ = [
    "Chapter", "Novel", "Window", "WindowConfig", "build_window", "load_novel", "select_excerpts",
    "split_chapters", "PlotloomError", "CausalEdge", "CharacterArc", "PlotEvent", "PlotGraph", "Strength",
    "TraversalMode", "break_cycles", "is_acyclic", "sanitize_edges", "traverse",
]
