"""Memory-access trace files, event model, and stack replay.

A trace is UTF-8 text, one JSON object per line. The first line is a header
record ``{"t":"hdr","version":1}``; every following line is one event:

    {"t":"acc","th":0,"ip":"0x400100","addr":"0x7f00","w":8,"k":"st","v":"0x2a"}
    {"t":"ncall","th":0,"id":7,"sym":"array_subscript","mod":"multiarray.so","ip":"0x7f3a10","eval":false}
    {"t":"nret","th":0,"id":7}
    {"t":"pycall","th":0,"id":3,"fn":"func2","file":"app.py","line":17}
    {"t":"pyret","th":0,"id":3}
    {"t":"renter","th":0,"r":"gc"}
    {"t":"rexit","th":0,"r":"gc"}
    {"t":"alloc","obj":11,"base":"0x7f00","size":64}
    {"t":"free","obj":11}

Addresses and values are lowercase hex strings with an ``0x`` prefix. Key
sets are closed: an unknown key on a version-1 record is a parse error.
Event sequence numbers are implicit (0-based line index after the header)
and are assigned by the reader.

Call stacks are not embedded per access. They are reconstructed by
replaying call/return/region/lifetime events; ``replay_stacks`` yields the
per-thread state in effect when each event occurs.
"""

from __future__ import annotations

import json
from bisect import bisect_right, insort
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Union

from .errors import MalformedEvent, MalformedLine, StackDiscipline, UnsupportedVersion
from .frames import NativeFrame as _NativeFrame, PyFrame as _PyFrame

TRACE_VERSION = 1

LOAD = "load"
STORE = "store"
KINDS = (LOAD, STORE)
WIDTHS = (1, 2, 4, 8)

REGION_GC = "gc"
REGION_LOADER = "loader"
REGION_BLOCKLISTED = "blocklisted"
REGIONS = (REGION_GC, REGION_LOADER, REGION_BLOCKLISTED)

_U32 = 2**32 - 1
_U64 = 2**64 - 1

_KIND_WIRE = {LOAD: "ld", STORE: "st"}
_WIRE_KIND = {v: k for k, v in _KIND_WIRE.items()}


def width_mask(width: int) -> int:
    return (1 << (8 * width)) - 1


@dataclass(slots=True)
class Access:
    ip: int
    addr: int
    width: int
    kind: str
    value: int


@dataclass(slots=True)
class PyCall:
    frame_id: int
    function: str
    file: str
    line: int


@dataclass(slots=True)
class PyReturn:
    frame_id: int


@dataclass(slots=True)
class NativeCall:
    call_id: int
    symbol: str
    module: str
    ip: int
    interp_eval: bool


@dataclass(slots=True)
class NativeReturn:
    call_id: int


@dataclass(slots=True)
class RegionEnter:
    region: str


@dataclass(slots=True)
class RegionExit:
    region: str


@dataclass(slots=True)
class Alloc:
    obj_id: int
    base: int
    size: int


@dataclass(slots=True)
class Free:
    obj_id: int


Payload = Union[
    Access, PyCall, PyReturn, NativeCall, NativeReturn,
    RegionEnter, RegionExit, Alloc, Free,
]


@dataclass(slots=True)
class TraceEvent:
    seq: int
    thread: int
    payload: Payload


def _payload_problem(thread: int, p: Payload) -> Optional[str]:
    """Field-level invariant check; returns a description or None."""
    if not (0 <= thread <= _U32):
        return f"thread {thread} out of 32-bit range"
    if type(p) is Access:
        if p.width not in WIDTHS:
            return f"width {p.width} not in {WIDTHS}"
        if p.kind not in KINDS:
            return f"kind {p.kind!r} unknown"
        if not (0 <= p.ip <= _U64) or not (0 <= p.addr <= _U64):
            return "ip/addr out of 64-bit range"
        if not (0 <= p.value <= width_mask(p.width)):
            return f"value 0x{p.value:x} does not fit width {p.width}"
    elif type(p) is PyCall:
        if not (0 <= p.frame_id <= _U64):
            return "frame_id out of range"
        if not (0 <= p.line <= _U32):
            return "line out of 32-bit range"
    elif type(p) is PyReturn:
        if not (0 <= p.frame_id <= _U64):
            return "frame_id out of range"
    elif type(p) is NativeCall:
        if not (0 <= p.call_id <= _U64) or not (0 <= p.ip <= _U64):
            return "call_id/ip out of range"
        if not isinstance(p.interp_eval, bool):
            return "interp_eval must be a bool"
    elif type(p) is NativeReturn:
        if not (0 <= p.call_id <= _U64):
            return "call_id out of range"
    elif type(p) in (RegionEnter, RegionExit):
        if p.region not in REGIONS:
            return f"region {p.region!r} unknown"
    elif type(p) is Alloc:
        if not (0 <= p.obj_id <= _U64) or not (0 <= p.base <= _U64):
            return "obj_id/base out of range"
        if not (1 <= p.size <= _U64):
            return "size must be positive"
    elif type(p) is Free:
        if not (0 <= p.obj_id <= _U64):
            return "obj_id out of range"
    else:
        return f"unknown payload type {type(p).__name__}"
    return None


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _hx(v: int) -> str:
    return f"0x{v:x}"


def event_to_line(ev: TraceEvent) -> str:
    """Canonical single-line encoding of one event (no newline)."""
    problem = _payload_problem(ev.thread, ev.payload)
    if problem is not None:
        raise MalformedEvent(f"seq {ev.seq}: {problem}")
    p = ev.payload
    t = type(p)
    if t is Access:
        d = {"t": "acc", "th": ev.thread, "ip": _hx(p.ip), "addr": _hx(p.addr),
             "w": p.width, "k": _KIND_WIRE[p.kind], "v": _hx(p.value)}
    elif t is NativeCall:
        d = {"t": "ncall", "th": ev.thread, "id": p.call_id, "sym": p.symbol,
             "mod": p.module, "ip": _hx(p.ip), "eval": p.interp_eval}
    elif t is NativeReturn:
        d = {"t": "nret", "th": ev.thread, "id": p.call_id}
    elif t is PyCall:
        d = {"t": "pycall", "th": ev.thread, "id": p.frame_id, "fn": p.function,
             "file": p.file, "line": p.line}
    elif t is PyReturn:
        d = {"t": "pyret", "th": ev.thread, "id": p.frame_id}
    elif t is RegionEnter:
        d = {"t": "renter", "th": ev.thread, "r": p.region}
    elif t is RegionExit:
        d = {"t": "rexit", "th": ev.thread, "r": p.region}
    elif t is Alloc:
        d = {"t": "alloc", "obj": p.obj_id, "base": _hx(p.base), "size": p.size}
    else:  # Free
        d = {"t": "free", "obj": p.obj_id}
    return json.dumps(d, separators=(",", ":"))


def _want_int(d: dict, key: str, line_no: int, hi: int) -> int:
    v = d.get(key)
    if type(v) is not int or not (0 <= v <= hi):
        raise MalformedLine(line_no, f"field {key!r} must be an integer in range")
    return v


def _want_hex(d: dict, key: str, line_no: int) -> int:
    v = d.get(key)
    if type(v) is not str or not v.startswith("0x"):
        raise MalformedLine(line_no, f"field {key!r} must be an 0x-prefixed hex string")
    try:
        n = int(v, 16)
    except ValueError:
        raise MalformedLine(line_no, f"field {key!r} is not valid hex") from None
    if n > _U64:
        raise MalformedLine(line_no, f"field {key!r} exceeds 64 bits")
    return n


def _want_str(d: dict, key: str, line_no: int) -> str:
    v = d.get(key)
    if type(v) is not str:
        raise MalformedLine(line_no, f"field {key!r} must be a string")
    return v


_RECORD_KEYS = {
    "acc": {"t", "th", "ip", "addr", "w", "k", "v"},
    "ncall": {"t", "th", "id", "sym", "mod", "ip", "eval"},
    "nret": {"t", "th", "id"},
    "pycall": {"t", "th", "id", "fn", "file", "line"},
    "pyret": {"t", "th", "id"},
    "renter": {"t", "th", "r"},
    "rexit": {"t", "th", "r"},
    "alloc": {"t", "obj", "base", "size"},
    "free": {"t", "obj"},
}


def line_to_event(line: str, line_no: int, seq: int) -> TraceEvent:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedLine(line_no, f"not valid JSON: {e.msg}") from None
    if not isinstance(d, dict):
        raise MalformedLine(line_no, "record is not an object")
    t = d.get("t")
    expected = _RECORD_KEYS.get(t)
    if expected is None:
        raise MalformedLine(line_no, f"unknown record type {t!r}")
    if set(d) != expected:
        raise MalformedLine(line_no, f"record {t!r} must carry exactly keys {sorted(expected)}")

    if t in ("alloc", "free"):
        thread = 0
    else:
        thread = _want_int(d, "th", line_no, _U32)

    if t == "acc":
        width = d.get("w")
        if width not in WIDTHS:
            raise MalformedLine(line_no, f"width must be one of {WIDTHS}")
        kind = _WIRE_KIND.get(d.get("k"))
        if kind is None:
            raise MalformedLine(line_no, "kind must be 'ld' or 'st'")
        value = _want_hex(d, "v", line_no)
        if value > width_mask(width):
            raise MalformedLine(line_no, f"value does not fit width {width}")
        p: Payload = Access(ip=_want_hex(d, "ip", line_no), addr=_want_hex(d, "addr", line_no),
                            width=width, kind=kind, value=value)
    elif t == "ncall":
        ev_flag = d.get("eval")
        if not isinstance(ev_flag, bool):
            raise MalformedLine(line_no, "field 'eval' must be a boolean")
        p = NativeCall(call_id=_want_int(d, "id", line_no, _U64), symbol=_want_str(d, "sym", line_no),
                       module=_want_str(d, "mod", line_no), ip=_want_hex(d, "ip", line_no),
                       interp_eval=ev_flag)
    elif t == "nret":
        p = NativeReturn(call_id=_want_int(d, "id", line_no, _U64))
    elif t == "pycall":
        p = PyCall(frame_id=_want_int(d, "id", line_no, _U64), function=_want_str(d, "fn", line_no),
                   file=_want_str(d, "file", line_no), line=_want_int(d, "line", line_no, _U32))
    elif t == "pyret":
        p = PyReturn(frame_id=_want_int(d, "id", line_no, _U64))
    elif t == "renter" or t == "rexit":
        region = d.get("r")
        if region not in REGIONS:
            raise MalformedLine(line_no, f"region must be one of {REGIONS}")
        p = RegionEnter(region) if t == "renter" else RegionExit(region)
    elif t == "alloc":
        size = _want_int(d, "size", line_no, _U64)
        if size == 0:
            raise MalformedLine(line_no, "alloc size must be positive")
        p = Alloc(obj_id=_want_int(d, "obj", line_no, _U64), base=_want_hex(d, "base", line_no),
                  size=size)
    else:  # free
        p = Free(obj_id=_want_int(d, "obj", line_no, _U64))
    return TraceEvent(seq=seq, thread=thread, payload=p)


def read_trace(path) -> Iterator[TraceEvent]:
    """Lazily yield events from a trace file, assigning seq from line order.

    Stack discipline is *not* checked here; use validate_trace for that.
    """
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise MalformedLine(1, "missing header record")
        try:
            h = json.loads(header)
        except json.JSONDecodeError:
            raise MalformedLine(1, "header is not valid JSON") from None
        if not isinstance(h, dict) or h.get("t") != "hdr" or set(h) != {"t", "version"}:
            raise MalformedLine(1, 'header must be {"t":"hdr","version":N}')
        if h.get("version") != TRACE_VERSION:
            raise UnsupportedVersion(f"trace version {h.get('version')!r}, expected {TRACE_VERSION}")
        seq = 0
        for line_no, line in enumerate(fh, start=2):
            yield line_to_event(line.rstrip("\n"), line_no, seq)
            seq += 1


def write_trace(events: Iterable[TraceEvent], path) -> None:
    """Write the canonical serialization; read_trace(write_trace(S)) == S."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"t": "hdr", "version": TRACE_VERSION}, separators=(",", ":")))
        fh.write("\n")
        for ev in events:
            fh.write(event_to_line(ev))
            fh.write("\n")


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

class LiveObjects:
    """Live heap objects as disjoint [base, base+size) ranges."""

    __slots__ = ("_by_id", "_bases")

    def __init__(self):
        self._by_id: dict[int, tuple[int, int]] = {}
        self._bases: list[tuple[int, int]] = []  # sorted (base, obj_id)

    def is_live(self, obj_id: int) -> bool:
        return obj_id in self._by_id

    def range_of(self, obj_id: int) -> Optional[tuple[int, int]]:
        return self._by_id.get(obj_id)

    def overlaps(self, base: int, size: int) -> bool:
        # Live ranges are disjoint, so only the neighbors can overlap.
        i = bisect_right(self._bases, (base, _U64))
        if i < len(self._bases) and self._bases[i][0] < base + size:
            return True
        if i > 0:
            nb_base, nb_id = self._bases[i - 1]
            nb_size = self._by_id[nb_id][1]
            if nb_base + nb_size > base:
                return True
        return False

    def alloc(self, obj_id: int, base: int, size: int) -> None:
        self._by_id[obj_id] = (base, size)
        insort(self._bases, (base, obj_id))

    def free(self, obj_id: int) -> None:
        base, _size = self._by_id.pop(obj_id)
        i = bisect_right(self._bases, (base, obj_id)) - 1
        self._bases.pop(i)

    def find(self, addr: int) -> Optional[int]:
        """Return the obj_id of the live object containing addr, if any."""
        i = bisect_right(self._bases, (addr, _U64)) - 1
        if i < 0:
            return None
        base, obj_id = self._bases[i]
        if addr < base + self._by_id[obj_id][1]:
            return obj_id
        return None


class ThreadStacks:
    """Per-thread call-stack view reconstructed from the event stream.

    native and py are root-to-leaf tuples; they are replaced, never mutated,
    so a reference taken at one event stays valid. version increments on
    every call or return and identifies a stack configuration.

    hybrid is the merged call path maintained incrementally: native frames
    in stack order, with each interpreter eval frame holding either None
    (interpreted frame not yet entered) or the interpreted frame that runs
    inside it. hybrid_balanced() tells whether every eval frame is paired,
    which is what the merge invariant demands at any access.
    """

    __slots__ = ("native", "py", "regions", "version", "eval_frames",
                 "hybrid", "eval_slots", "filled", "py_over")

    def __init__(self):
        self.native: tuple[NativeCall, ...] = ()
        self.py: tuple[PyCall, ...] = ()
        self.regions: dict[str, int] = {}
        self.version = 0
        self.eval_frames = 0
        self.hybrid: tuple = ()
        self.eval_slots: list[int] = []  # hybrid indexes of eval frames
        self.filled = 0                  # leading eval_slots already paired
        self.py_over = 0                 # interpreted frames with no eval slot

    def innermost_call_id(self) -> Optional[int]:
        return self.native[-1].call_id if self.native else None

    def hybrid_balanced(self) -> bool:
        return self.filled == len(self.eval_slots) and self.py_over == 0

    def region_open(self, region: str) -> bool:
        return self.regions.get(region, 0) > 0

    def any_region_open(self, regions) -> bool:
        get = self.regions.get
        for r in regions:
            if get(r, 0) > 0:
                return True
        return False


class ReplayState:
    """Whole-process view: per-thread stacks plus the live object table."""

    __slots__ = ("threads", "objects")

    def __init__(self):
        self.threads: dict[int, ThreadStacks] = {}
        self.objects = LiveObjects()

    def thread(self, tid: int) -> ThreadStacks:
        t = self.threads.get(tid)
        if t is None:
            t = ThreadStacks()
            self.threads[tid] = t
        return t


def replay_stacks(
    events: Iterable[TraceEvent],
    strict: bool = True,
    on_violation: Optional[Callable[[int, str, str], None]] = None,
) -> Iterator[tuple[TraceEvent, ReplayState]]:
    """Replay call/return/region/lifetime events.

    Yields (event, state) with the state as of the moment the event occurs;
    the event's own effect is applied after the yield. In strict mode a
    discipline violation raises StackDiscipline; otherwise it is reported to
    on_violation and the offending event is ignored.
    """
    state = ReplayState()
    objects = state.objects

    def bad(seq: int, category: str, detail: str) -> None:
        if strict:
            raise StackDiscipline(seq, detail)
        if on_violation is not None:
            on_violation(seq, category, detail)

    for ev in events:
        yield ev, state
        p = ev.payload
        t = type(p)
        if t is Access:
            continue
        if t is NativeCall:
            ts = state.thread(ev.thread)
            ts.native = ts.native + (p,)
            if p.interp_eval:
                ts.eval_frames += 1
                ts.eval_slots.append(len(ts.hybrid))
                ts.hybrid = ts.hybrid + (None,)
            else:
                ts.hybrid = ts.hybrid + (_NativeFrame(p.symbol, p.module, p.ip),)
            ts.version += 1
        elif t is NativeReturn:
            ts = state.thread(ev.thread)
            if not ts.native or ts.native[-1].call_id != p.call_id:
                bad(ev.seq, "StackDiscipline",
                    f"native return id={p.call_id} does not match innermost call")
                continue
            if ts.native[-1].interp_eval:
                ts.eval_frames -= 1
                if ts.eval_slots:
                    ts.eval_slots.pop()
                    if ts.filled > len(ts.eval_slots):
                        ts.filled = len(ts.eval_slots)
            ts.native = ts.native[:-1]
            ts.hybrid = ts.hybrid[:-1]
            ts.version += 1
        elif t is PyCall:
            ts = state.thread(ev.thread)
            ts.py = ts.py + (p,)
            # Pair with the shallowest unpaired eval frame, if any.
            if ts.filled < len(ts.eval_slots):
                pos = ts.eval_slots[ts.filled]
                ts.hybrid = (ts.hybrid[:pos]
                             + (_PyFrame(p.function, p.file, p.line),)
                             + ts.hybrid[pos + 1:])
                ts.filled += 1
            else:
                ts.py_over += 1
            ts.version += 1
        elif t is PyReturn:
            ts = state.thread(ev.thread)
            if not ts.py or ts.py[-1].frame_id != p.frame_id:
                bad(ev.seq, "StackDiscipline",
                    f"py return id={p.frame_id} does not match innermost frame")
                continue
            ts.py = ts.py[:-1]
            if ts.py_over:
                ts.py_over -= 1
            elif ts.filled:
                ts.filled -= 1
                pos = ts.eval_slots[ts.filled]
                ts.hybrid = ts.hybrid[:pos] + (None,) + ts.hybrid[pos + 1:]
            ts.version += 1
        elif t is RegionEnter:
            ts = state.thread(ev.thread)
            ts.regions[p.region] = ts.regions.get(p.region, 0) + 1
        elif t is RegionExit:
            ts = state.thread(ev.thread)
            if ts.regions.get(p.region, 0) <= 0:
                bad(ev.seq, "RegionDiscipline", f"exit of region {p.region!r} that is not open")
                continue
            ts.regions[p.region] -= 1
        elif t is Alloc:
            if objects.is_live(p.obj_id):
                bad(ev.seq, "ObjectLifetime", f"alloc of already-live obj {p.obj_id}")
                continue
            if objects.overlaps(p.base, p.size):
                bad(ev.seq, "ObjectLifetime",
                    f"alloc [0x{p.base:x},+{p.size}) overlaps a live object")
                continue
            objects.alloc(p.obj_id, p.base, p.size)
        elif t is Free:
            if not objects.is_live(p.obj_id):
                bad(ev.seq, "ObjectLifetime", f"free of non-live obj {p.obj_id}")
                continue
            objects.free(p.obj_id)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Violation:
    seq: int
    category: str
    detail: str


@dataclass(slots=True)
class ValidationReport:
    ok: bool
    violations: list[Violation]


def validate_trace(events: Iterable[TraceEvent]) -> ValidationReport:
    """Check every event-stream invariant; violations are data, not errors.

    Categories: SequenceOrder, MalformedEvent, StackDiscipline,
    RegionDiscipline, ObjectLifetime, HybridMismatch.
    """
    violations: list[Violation] = []

    def collect(seq: int, category: str, detail: str) -> None:
        violations.append(Violation(seq, category, detail))

    prev_seq = -1
    for ev, state in replay_stacks(events, strict=False, on_violation=collect):
        if ev.seq <= prev_seq:
            collect(ev.seq, "SequenceOrder", f"seq {ev.seq} not greater than {prev_seq}")
        prev_seq = ev.seq
        problem = _payload_problem(ev.thread, ev.payload)
        if problem is not None:
            collect(ev.seq, "MalformedEvent", problem)
            continue
        if type(ev.payload) is Access:
            ts = state.thread(ev.thread)
            if ts.eval_frames != len(ts.py):
                collect(ev.seq, "HybridMismatch",
                        f"{ts.eval_frames} eval frames but {len(ts.py)} py frames open")
    return ValidationReport(ok=not violations, violations=violations)
