"""Exception hierarchy shared by every flowgen module.

All domain errors derive from :class:`FlowGenError` so callers (the CLI, the
evaluation harness) can separate domain failures from programming errors.
"""

from __future__ import annotations

from dataclasses import dataclass


class FlowGenError(Exception):
    """Base class for all domain errors raised by flowgen."""


@dataclass(frozen=True)
class SourceSpan:
    """1-based line/column position inside IR source text."""

    line: int
    column: int

    def __post_init__(self) -> None:
        if self.line < 1 or self.column < 1:
            raise ValueError(f"invalid source span {self.line}:{self.column}")

    def __str__(self) -> str:
        return f"{self.line}:{self.column}"


class IRSyntaxError(FlowGenError, SyntaxError):
    """Source text is not a program of the restricted IR subset."""

    def __init__(self, message: str, span: SourceSpan, raw_text: str | None = None):
        super().__init__(f"{span}: {message}")
        self.message = message
        self.span = span
        self.lineno = span.line
        self.offset = span.column
        # set by the generation pipeline so reports can show what the model said
        self.raw_text = raw_text

    def __str__(self) -> str:
        return f"{self.span}: {self.message}"


class ParseError(FlowGenError):
    """Malformed BPMN XML."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.message = message
        self.path = path


class UnsupportedElement(ParseError):
    """BPMN construct outside the supported vocabulary."""

    def __init__(self, element: str, path: str = ""):
        super().__init__(f"unsupported BPMN element <{element}>", path)
        self.element = element


class ValidationError(FlowGenError):
    """A BPMN document violates a structural invariant."""


class DecompileError(FlowGenError):
    """A BPMN document cannot be turned back into an IR program."""


class PathError(FlowGenError):
    """An edit operation addresses a statement that does not exist."""


class PatchError(FlowGenError):
    """Applying an edit script to a BPMN document failed."""


class CatalogError(FlowGenError):
    """Activity catalog JSON is malformed."""


class ProviderError(FlowGenError):
    """The language-model provider failed (transport, status, missing entry)."""


class ExtractionError(FlowGenError):
    """A model response contains no recognisable code region."""

    def __init__(self, message: str, raw_text: str = ""):
        super().__init__(message)
        self.raw_text = raw_text


class DatasetError(FlowGenError):
    """A benchmark case file is missing, unparseable or inconsistent."""

    def __init__(self, file: str, reason: str):
        super().__init__(f"{file}: {reason}")
        self.file = file
        self.reason = reason
