"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class PlotloomError(Exception):
    """Base class for all plotloom errors."""


class ConfigError(PlotloomError):
    def __init__(self, key: str, message: str = "") -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)


class EmptyInput(PlotloomError, ValueError):
    pass


class BudgetTooSmall(PlotloomError, ValueError):
    pass


class DocTooShort(UserWarning):
    """Issued (not raised) when fewer excerpts than requested could be cut."""


# -- graph -------------------------------------------------------------------


class DanglingEndpoint(PlotloomError, ValueError):
    def __init__(self, edge_from: str, edge_to: str, missing: str) -> None:
        self.missing = missing
        super().__init__(f"edge {edge_from}->{edge_to} references unknown event {missing!r}")


class CyclicGraph(PlotloomError, ValueError):
    pass


class UnknownEventId(PlotloomError, KeyError):
    def __init__(self, ids: list[str]) -> None:
        self.ids = list(ids)
        super().__init__(f"unknown event ids: {', '.join(self.ids)}")

    def __str__(self) -> str:
        return self.args[0]


# -- backends ----------------------------------------------------------------


class BackendError(PlotloomError):
    pass


class BackendUnavailable(BackendError):
    pass


class AuthMissing(BackendError):
    pass


class ScriptExhausted(BackendError):
    def __init__(self, tag: str, ordinal: int) -> None:
        self.tag = tag
        self.ordinal = ordinal
        super().__init__(f"mock script has no response for tag={tag!r} ordinal={ordinal}")


class TemplateError(PlotloomError, KeyError):
    def __str__(self) -> str:
        return self.args[0] if self.args else ""


class MalformedOutput(PlotloomError, ValueError):
    def __init__(self, message: str, raw: str = "") -> None:
        self.raw = raw
        super().__init__(message)


class SchemaViolation(MalformedOutput):
    """Parsed JSON that does not satisfy the stage schema.

    ``field`` is the innermost offending field name, ``path`` the dotted
    location inside the payload.
    """

    def __init__(self, field: str, message: str = "", raw: str = "", path: str = "") -> None:
        self.field = field
        self.path = path or field
        super().__init__(f"{self.path}: {message}" if message else self.path, raw)


# -- refinement / rewriting --------------------------------------------------


class MergeConflict(PlotloomError, ValueError):
    pass


class CountMismatch(PlotloomError, ValueError):
    pass


class InvalidSlugline(PlotloomError, ValueError):
    def __init__(self, indices: list[int]) -> None:
        self.indices = list(indices)
        super().__init__(f"invalid slugline in scene(s): {', '.join(map(str, self.indices))}")


# -- evaluation --------------------------------------------------------------


class InvalidCounts(PlotloomError, ValueError):
    pass


class LengthMismatch(PlotloomError, ValueError):
    pass


class StageError(PlotloomError):
    """An unrecoverable failure inside a named pipeline stage."""

    def __init__(self, stage: str, message: str, *, chapter: int | None = None, checkpoint: str | None = None) -> None:
        self.stage = stage
        self.chapter = chapter
        self.checkpoint = checkpoint
        where = f" (chapter {chapter})" if chapter is not None else ""
        saved = f"; checkpoint written: {checkpoint}" if checkpoint else ""
        super().__init__(f"stage {stage}{where} failed: {message}{saved}")


class MissingCheckpoint(PlotloomError):
    """A stage was asked to run before the stage it depends on."""

    def __init__(self, name: str, path: str = "") -> None:
        self.name = name
        self.path = path
        super().__init__(f"missing checkpoint: {name}")
