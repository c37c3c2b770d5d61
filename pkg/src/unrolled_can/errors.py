"""Exception hierarchy.

``DomainError`` subclasses signal a violated precondition on otherwise
well-formed input; the CLI maps them to exit code 2. ``MidiError`` covers
unreadable bytes and maps to exit code 1.
"""


class CanRollError(Exception):
    """Base class for every error raised by this package."""


class DomainError(CanRollError):
    pass


class MidiError(CanRollError):
    pass


class MalformedHeader(MidiError):
    pass


class TruncatedTrack(MidiError):
    pass


class UnsupportedFormat(MidiError):
    pass


class MalformedEvent(MidiError):
    pass


class EmptyCorpus(DomainError):
    pass


class SingleClass(DomainError):
    pass


class BatchTooLarge(DomainError):
    pass


class ShapeMismatch(DomainError):
    pass


class EmptyBatch(DomainError):
    pass


class LabelOutOfRange(DomainError):
    pass


class DegenerateK(DomainError):
    pass


class InsufficientBatches(DomainError):
    pass


class EmptySet(DomainError):
    pass


class EmptySamples(DomainError):
    pass


class CorruptContainer(DomainError):
    """Bad magic, unknown version or truncated payload in a container file."""
