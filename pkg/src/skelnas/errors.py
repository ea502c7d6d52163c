"""Exception hierarchy shared by all engine modules."""


class SkelNasError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SkelNasError):
    """Shapes disagree; the message names the offending axis."""


class ConfigurationError(SkelNasError):
    """An operator or run configuration is structurally invalid."""


class InputError(SkelNasError):
    """Caller-supplied data violates a precondition."""


class ParseError(SkelNasError):
    """A text artifact (clip file, genotype, checkpoint) is malformed.

    ``line`` or ``offset`` locate the failure when known.
    """

    def __init__(self, message, line=None, offset=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"byte offset {offset}")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(message + suffix)
        self.line = line
        self.offset = offset


class StateError(SkelNasError):
    """An operation ran against uninitialized or stale mutable state."""


class UsageError(SkelNasError):
    """An API was called in a way its contract forbids."""


class NumericFault(SkelNasError):
    """A non-finite value surfaced during computation."""


class CheckpointError(SkelNasError):
    """Checkpoint contents do not match the target network."""


class DegenerateBatchError(SkelNasError):
    """A statistic needs at least two samples and got fewer."""
