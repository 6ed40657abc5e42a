"""Exception types shared by the trace, tree, detector, and synth layers."""


class TraceError(Exception):
    """Base class for anything wrong with a trace file or event stream."""


class MalformedLine(TraceError):
    """A trace file line that cannot be decoded into an event."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class UnsupportedVersion(TraceError):
    """Trace header declares a format version this reader does not speak."""


class MalformedEvent(TraceError):
    """An in-memory event violates a field-level invariant (e.g. width=3)."""


class StackDiscipline(TraceError):
    """A return/region/lifetime event does not match the open state."""

    def __init__(self, seq: int, detail: str):
        super().__init__(f"seq {seq}: {detail}")
        self.seq = seq
        self.detail = detail


class HybridMismatch(Exception):
    """Interpreter eval frame count disagrees with the interpreted stack."""


class UnknownPathId(Exception):
    """A path handle that was never issued by this tree."""


class InvalidConfig(ValueError):
    """Detector configuration out of range."""


class InvalidSpec(ValueError):
    """Trace generator parameters out of range."""


class UnknownFixture(KeyError):
    """No case-study fixture registered under that name."""


class InternalInvariant(Exception):
    """A bug: an internal consistency check failed during a run."""
