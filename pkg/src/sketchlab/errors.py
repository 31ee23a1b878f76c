"""Exception hierarchy shared across the package.

Every failure the CLI can hit maps to a distinct exit code (see cli.EXIT_CODES),
so new error classes should be added here rather than raised ad hoc.
"""

from __future__ import annotations


class SketchLabError(Exception):
    """Base class for all package errors."""


class ValidationError(SketchLabError):
    """Bad argument values: empty text, out-of-range scalars, non-finite data."""


class DimensionError(SketchLabError):
    """Shape mismatch. Messages must name both offending shapes."""


class StateError(SketchLabError):
    """Operation called in the wrong order (backward before forward, double merge...)."""


class ConfigError(SketchLabError):
    """Invalid or inconsistent configuration."""


class TemplateError(SketchLabError):
    """Prompt template rendering failed; carries the missing slot names."""

    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        super().__init__(f"template slots missing values: {', '.join(self.missing)}")


class IngestError(SketchLabError):
    """Dataset ingestion failed; carries one message per offending record."""

    def __init__(self, items: list[str]):
        self.items = list(items)
        lines = "\n".join(f"  - {item}" for item in self.items)
        super().__init__(f"{len(self.items)} manifest record(s) failed to ingest:\n{lines}")


class DegenerateCombinationError(ValidationError):
    """Combining two embeddings produced a (near-)zero vector that cannot be normalized."""


class BackendError(SketchLabError):
    """A generator backend failed; message carries the iteration context."""


class TrainingError(SketchLabError):
    """Training aborted (non-finite loss); message carries epoch/batch diagnostics."""
