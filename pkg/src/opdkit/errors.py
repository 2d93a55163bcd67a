"""Exception hierarchy shared across opdkit."""

from __future__ import annotations


class OpdError(Exception):
    """Base class for every error raised by opdkit."""


class TraceError(OpdError, ValueError):
    pass


class EmptyTrace(TraceError):
    def __init__(self):
        super().__init__("potential trace is empty")


class OutOfRange(TraceError):
    def __init__(self, index: int, value: float):
        self.index = index
        self.value = value
        super().__init__(f"potential {value!r} at index {index} lies outside [0, 1]")


class NonFinite(TraceError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"non-finite potential at index {index}")


class DegenerateTrace(TraceError):
    """A metric that divides by the step count was given a single state."""


class TooShort(TraceError):
    pass


class WindowTooLarge(TraceError):
    pass


class EmptySequence(OpdError, ValueError):
    pass


class NoReferences(OpdError, ValueError):
    pass


class InvalidTail(OpdError, ValueError):
    pass


class ConfigError(OpdError, ValueError):
    pass


# consistency


class TooFewStates(OpdError, ValueError):
    pass


class AnchorNotInSet(OpdError, KeyError):
    pass


class NotARefinement(OpdError, ValueError):
    pass


class InvalidPartition(OpdError, ValueError):
    pass


class EvaluatorFailure(OpdError, RuntimeError):
    pass


# sampler


class TooShortEpisode(OpdError, ValueError):
    pass


class NoMonotonicPhases(OpdError, ValueError):
    pass


class DegenerateDenominator(OpdError, ValueError):
    pass


class ZeroHop(OpdError, ValueError):
    pass


class InvalidAlpha(OpdError, ValueError):
    pass


class AnnotationError(OpdError, ValueError):
    pass


# judges and scoring


class JudgeError(OpdError):
    pass


class JudgeTimeout(JudgeError):
    pass


class ProtocolError(JudgeError):
    pass


class BatchFailed(JudgeError):
    """Every item of a batch failed; ``verdicts`` still carries the failure records."""

    def __init__(self, verdicts):
        self.verdicts = verdicts
        first = next((v.error for v in verdicts if v.error), "unknown error")
        super().__init__(f"all {len(verdicts)} judge requests failed (first: {first})")


class IdMismatch(OpdError, ValueError):
    pass


class EmptyInput(OpdError, ValueError):
    pass
