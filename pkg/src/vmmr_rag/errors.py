"""Exception hierarchy shared by all modules.

Errors fall in two families that the CLI maps to exit codes: validation
problems caused by user input (exit 2) and backend/transport failures
(exit 3).
"""

from __future__ import annotations


class VmmrError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(VmmrError):
    """Bad user input, malformed files, or broken preconditions."""


class BackendError(VmmrError):
    """A model backend could not produce a usable answer."""


class EmptyLabelPart(ValidationError):
    pass


class DuplicateLabel(ValidationError):
    pass


class InvalidInput(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    pass


class DuplicateRecordId(ValidationError):
    pass


class CorruptIndexFile(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class UnresolvedRecordId(ValidationError):
    pass


class TemplateRenderError(ValidationError):
    pass


class UnknownQueryId(ValidationError):
    pass


class MissingLabelEmbedding(ValidationError):
    pass


class MissingTruth(ValidationError):
    pass


class EmptyPredictionList(ValidationError):
    pass


class BatchEmpty(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class MissingFixture(ValidationError):
    """A fixture backend has no recorded file for the requested key."""


class BackendUnreachable(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


class EmptyDescription(BackendError):
    pass


class StageError(VmmrError):
    """Wraps an error raised inside one pipeline stage, keeping the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
