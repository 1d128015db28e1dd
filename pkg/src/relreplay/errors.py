"""Failure taxonomy shared across the package."""


class RelReplayError(Exception):
    """Base class for all errors raised by relreplay."""


class ConfigError(RelReplayError):
    """Invalid configuration: bad shapes, unknown keys, out-of-range values."""


class UsageError(RelReplayError):
    """Contract violation at a call site (stale state, mismatched provenance)."""


class NumericError(RelReplayError):
    """Non-finite values where finite ones are required."""


class FormatError(RelReplayError):
    """Malformed external file (bad magic number, truncated record)."""


class EmptyBufferError(RelReplayError):
    """Sampling was requested from an empty rehearsal buffer."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss; carries the tail of the step trace."""

    def __init__(self, message: str, trace_tail=None):
        super().__init__(message)
        self.trace_tail = list(trace_tail or [])
