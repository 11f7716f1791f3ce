"""
Error types shared by every package of the normalization toolkit.

Library code raises these; the CLI and the HTTP service translate them into
exit codes and JSON error bodies.
"""

from enum import Enum
from typing import Optional


class ErrorCode(Enum):
    """Stable error identifiers surfaced to callers."""
    EMPTY_SELECTION = "empty-selection"
    NON_FINITE = "non-finite"
    BAD_EPSILON = "bad-epsilon"
    SHAPE_MISMATCH = "shape-mismatch"
    TOO_FEW_POINTS = "too-few-points"
    EMPTY_CONTEXT = "empty-context"
    WRONG_ARITY = "wrong-arity"
    BAD_CONTEXT = "bad-context"
    BAD_POSTERIOR = "bad-posterior"
    MISSING_CONTEXTS = "missing-contexts"
    BAD_LABEL = "bad-label"
    NONDETERMINISTIC_LOSS = "nondeterministic-loss"
    PACKING_FAILED = "packing-failed"
    PARSE_ERROR = "parse-error"
    BAD_VERSION = "bad-version"
    BAD_CONFIG = "bad-config"
    EMPTY_REPORT = "empty-report"
    INVALID_ARGUMENT = "invalid-argument"


class NormError(Exception):
    """Base error carrying an ErrorCode."""

    def __init__(self, code: ErrorCode, message: str = ""):
        self.code = code
        self.message = message or code.value
        super().__init__(f"{code.value}: {self.message}")


class DataError(NormError):
    """Dataset files and generators: parse-error, bad-version, packing-failed."""


class ConfigError(NormError):
    """Experiment configuration violations, naming the offending field."""

    def __init__(self, field: str, message: str, code: ErrorCode = ErrorCode.BAD_CONFIG):
        self.field = field
        super().__init__(code, f"{field}: {message}")


def require(condition: bool, code: ErrorCode, message: str, error_type=NormError):
    """Raise `error_type(code, message)` unless `condition` holds."""
    if not condition:
        raise error_type(code, message)


def describe(error: Exception) -> Optional[str]:
    """Return the error code string for a NormError, None otherwise."""
    if isinstance(error, NormError):
        return error.code.value
    return None
