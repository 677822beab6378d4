"""
Error Hierarchy

Every failure raised by the toolkit is a CrossRegError carrying an exit code
and a human-readable detail, so the command-line layer can translate any
error into the documented process exit status without inspecting types.

Exit codes: 0 success, 1 partial/check failure, 2 I/O, 3 config/usage,
4 parse, 5 empty input.
"""

from typing import Optional

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_PARSE = 4
EXIT_EMPTY = 5


class CrossRegError(Exception):
    """
    Base error for the toolkit.

    Attributes:
        exit_code: Process exit status the CLI should use
        detail: Description of what went wrong
    """

    exit_code = EXIT_PARTIAL

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


class GeometryError(CrossRegError):
    """Invalid geometric input (empty reference cloud, bad transform)."""


class SimulationError(CrossRegError):
    """Scan simulation failure, e.g. an unreachable overlap target."""


class EncodingError(CrossRegError):
    """Feature extraction failure, e.g. a degenerate cloud."""


class AttentionError(CrossRegError):
    """Dimension or head-count mismatch inside an attention stage."""


class EmptyOverlapError(CrossRegError):
    """The overlap mask selected no superpoints."""


class MatchingError(CrossRegError):
    """Dense matching failure (empty group, non-finite scores)."""


class EstimationError(CrossRegError):
    """Pose estimation failure: underdetermined, degenerate or no consensus."""


class LossError(CrossRegError):
    """Mismatched inputs to the mask loss."""


class StageError(CrossRegError):
    """
    A pipeline stage failed; wraps the original error with the stage name.

    Attributes:
        stage: Name of the failing pipeline stage
        cause: The underlying error
    """

    def __init__(self, stage: str, cause: Exception):
        detail = f"stage '{stage}' failed: {cause}"
        exit_code = cause.exit_code if isinstance(cause, CrossRegError) else EXIT_PARTIAL
        super().__init__(detail, exit_code)
        self.stage = stage
        self.cause = cause


class ConfigError(CrossRegError):
    """Invalid configuration file, field value or command-line usage."""

    exit_code = EXIT_CONFIG


class FormatError(CrossRegError):
    """
    Malformed input file.

    Attributes:
        path: File that failed to parse
        offset: Byte offset of the offending line
    """

    exit_code = EXIT_PARSE

    def __init__(self, path: str, offset: int, reason: str):
        super().__init__(f"{path}: byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset


class StorageError(CrossRegError):
    """Unreadable/unwritable path or results-store failure."""

    exit_code = EXIT_IO


class EmptyInputError(CrossRegError):
    """No records or pairs to work on."""

    exit_code = EXIT_EMPTY
