"""Synthetic trace generation with a planted ground-truth redundancy rate.

Monitored accesses are organized into per-address chains. Consecutive
accesses to a chain address always come from different native call
instances, so each access except the last in its chain is resolved by its
successor; a successor keeps the previous value (a redundant resolution)
or breaks it (a non-redundant one). The number of value-keeping successors
is an exact count, which makes the oracle fraction match the requested
rate up to integer rounding.

Noise shares the access budget without touching chain addresses: header
accesses inside live objects (dropped by the junk filter), accesses inside
gc regions (dropped by hibernation), and a sprinkle of opposite-kind
accesses so the non-targeted mode has something to chew on. Object churn
frees and reallocates objects mid-trace.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .errors import InvalidSpec, UnknownFixture
from .trace import (
    Access,
    Alloc,
    Free,
    LOAD,
    NativeCall,
    NativeReturn,
    PyCall,
    PyReturn,
    RegionEnter,
    RegionExit,
    STORE,
    TraceEvent,
    width_mask,
)

_CHAIN_BASE = 0x1000_0000
_OBJ_BASE = 0x5000_0000
_HIB_BASE = 0x9000_0000
_NOISE_BASE = 0xB000_0000
_SYM_BASE = 0x7F00_0000_0000
_EVAL_IP = 0x7FEE_0000_0000

_LEAF_SYMBOLS = tuple(f"native_op_{i}" for i in range(8))
_HELPER_SYMBOLS = tuple(f"helper_{i}" for i in range(6))


class TraceBuilder:
    """Assembles well-formed event sequences; used by fixtures and tests."""

    def __init__(self):
        self.rows: list[tuple[int, object]] = []
        self._next_call = 1
        self._next_frame = 1

    def raw(self, thread: int, payload) -> None:
        self.rows.append((thread, payload))

    def enter_native(self, thread: int, symbol: str, module: str, ip: int,
                     interp_eval: bool = False) -> int:
        cid = self._next_call
        self._next_call += 1
        self.raw(thread, NativeCall(cid, symbol, module, ip, interp_eval))
        return cid

    def exit_native(self, thread: int, call_id: int) -> None:
        self.raw(thread, NativeReturn(call_id))

    def enter_py(self, thread: int, function: str, file: str, line: int,
                 module: str = "libpython.so") -> tuple[int, int]:
        """Push an interpreter eval frame paired with its interpreted frame."""
        cid = self.enter_native(thread, "interp_eval", module, _EVAL_IP, interp_eval=True)
        fid = self._next_frame
        self._next_frame += 1
        self.raw(thread, PyCall(fid, function, file, line))
        return cid, fid

    def exit_py(self, thread: int, handle: tuple[int, int]) -> None:
        cid, fid = handle
        self.raw(thread, PyReturn(fid))
        self.raw(thread, NativeReturn(cid))

    def access(self, thread: int, ip: int, addr: int, width: int, kind: str,
               value: int) -> None:
        self.raw(thread, Access(ip, addr, width, kind, value & width_mask(width)))

    def region_enter(self, thread: int, region: str) -> None:
        self.raw(thread, RegionEnter(region))

    def region_exit(self, thread: int, region: str) -> None:
        self.raw(thread, RegionExit(region))

    def alloc(self, obj_id: int, base: int, size: int) -> None:
        self.raw(0, Alloc(obj_id, base, size))

    def free(self, obj_id: int) -> None:
        self.raw(0, Free(obj_id))

    def build(self) -> list[TraceEvent]:
        return [TraceEvent(seq, thread, payload)
                for seq, (thread, payload) in enumerate(self.rows)]


@dataclass(slots=True)
class SynthSpec:
    seed: int = 0
    threads: int = 1
    n_accesses: int = 10_000
    mode_targeted: str = "stores"
    planted_fraction: float = 0.3
    address_pool: int = 64
    call_depth: int = 4
    call_fanout: int = 3
    eval_frame_ratio: float = 0.5
    junk_access_fraction: float = 0.05
    hibernation_window_fraction: float = 0.05
    object_count: int = 8
    free_churn_rate: float = 0.1

    def validate(self) -> None:
        if self.mode_targeted not in ("loads", "stores"):
            raise InvalidSpec(f"mode_targeted must be 'loads' or 'stores', got {self.mode_targeted!r}")
        if self.threads < 1:
            raise InvalidSpec("threads must be >= 1")
        if self.n_accesses < 0:
            raise InvalidSpec("n_accesses must be >= 0")
        for name in ("planted_fraction", "eval_frame_ratio",
                     "junk_access_fraction", "hibernation_window_fraction",
                     "free_churn_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidSpec(f"{name} must be in [0, 1], got {v}")
        if self.junk_access_fraction + self.hibernation_window_fraction > 0.9:
            raise InvalidSpec("junk and hibernation fractions leave no room for planted accesses")
        if self.address_pool < 1:
            raise InvalidSpec("address_pool must be >= 1")
        if self.call_depth < 1 or self.call_fanout < 1:
            raise InvalidSpec("call_depth and call_fanout must be >= 1")
        if self.object_count < 0:
            raise InvalidSpec("object_count must be >= 0")


class _ThreadProgram:
    """Stack bookkeeping for one generated thread."""

    def __init__(self, tid: int, builder: TraceBuilder, rng: random.Random,
                 spec: SynthSpec):
        self.tid = tid
        self.b = builder
        self.rng = rng
        self.spec = spec
        self.frames: list[tuple[str, object]] = []  # ("py", handle) | ("native", cid)

    def prologue(self):
        handle = self.b.enter_py(self.tid, "main", f"app_{self.tid}.py", 1)
        self.frames.append(("py", handle))

    def epilogue(self):
        while self.frames:
            self._pop()

    def _push(self):
        depth = len(self.frames)
        if self.rng.random() < self.spec.eval_frame_ratio:
            i = self.rng.randrange(self.spec.call_fanout)
            handle = self.b.enter_py(self.tid, f"level{depth}_fn{i}",
                                     f"app_{self.tid}.py", 10 * depth + i)
            self.frames.append(("py", handle))
        else:
            i = self.rng.randrange(len(_HELPER_SYMBOLS))
            sym = _HELPER_SYMBOLS[i]
            cid = self.b.enter_native(self.tid, sym, "libhelpers.so",
                                      _SYM_BASE + 0x10_0000 + i * 0x1000)
            self.frames.append(("native", cid))

    def _pop(self):
        kind, handle = self.frames.pop()
        if kind == "py":
            self.b.exit_py(self.tid, handle)
        else:
            self.b.exit_native(self.tid, handle)

    def maybe_reshape(self):
        if self.rng.random() >= 0.15:
            return
        depth = len(self.frames)
        if depth < self.spec.call_depth and (depth <= 1 or self.rng.random() < 0.6):
            self._push()
        elif depth > 1:
            self._pop()

    def leaf_access(self, addr: int, kind: str, value: int):
        """One access wrapped in its own native call instance."""
        i = self.rng.randrange(len(_LEAF_SYMBOLS))
        sym = _LEAF_SYMBOLS[i]
        ip = _SYM_BASE + i * 0x1000
        cid = self.b.enter_native(self.tid, sym, "libnative.so", ip)
        self.b.access(self.tid, ip + 0x40, addr, 8, kind, value)
        self.b.exit_native(self.tid, cid)


def generate(spec: SynthSpec) -> list[TraceEvent]:
    """Deterministically generate a validating trace for the given spec."""
    spec.validate()
    rng = random.Random(spec.seed)
    b = TraceBuilder()
    mask = width_mask(8)

    monitored = STORE if spec.mode_targeted == "stores" else LOAD
    opposite = LOAD if monitored == STORE else STORE

    n = spec.n_accesses
    n_noise = n // 100
    n_junk = int(round(n * spec.junk_access_fraction)) if spec.object_count else 0
    n_hib = int(round(n * spec.hibernation_window_fraction))
    n_mon = n - n_noise - n_junk - n_hib
    if n_mon < 0:
        raise InvalidSpec("access fractions exceed the access budget")

    # Chain layout: per-chain access counts fixed by global round-robin.
    n_chains = min(spec.address_pool, n_mon) if n_mon else 0
    chain_len = [n_mon // n_chains + (1 if c < n_mon % n_chains else 0)
                 for c in range(n_chains)]
    successors = sum(l - 1 for l in chain_len if l > 0)
    quota = int(round(spec.planted_fraction * successors))
    offsets = []
    acc = 0
    for l in chain_len:
        offsets.append(acc)
        acc += max(0, l - 1)
    redundant_steps = set(rng.sample(range(successors), quota)) if successors else set()

    chain_addr = [_CHAIN_BASE + c * 16 for c in range(n_chains)]
    chain_value = [rng.getrandbits(64) & mask for _ in range(n_chains)]
    chain_step = [0] * n_chains

    # Initial heap objects (junk-filter targets); churned at fixed points.
    obj_id = 0
    obj_slot = 0
    live: list[int] = []
    obj_base: dict[int, int] = {}
    for _ in range(spec.object_count):
        base = _OBJ_BASE + obj_slot * 0x100
        obj_slot += 1
        b.alloc(obj_id, base, 64)
        obj_base[obj_id] = base
        live.append(obj_id)
        obj_id += 1

    # Per-thread slot schedules.
    def split(total: int, parts: int) -> list[int]:
        return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]

    programs = [_ThreadProgram(t, b, rng, spec) for t in range(spec.threads)]
    schedules: list[list[str]] = []
    for t, (m, j, h, o) in enumerate(zip(split(n_mon, spec.threads),
                                         split(n_junk, spec.threads),
                                         split(n_hib, spec.threads),
                                         split(n_noise, spec.threads))):
        slots = ["mon"] * m + ["junk"] * j + ["hib"] * h + ["noise"] * o
        rng.shuffle(slots)
        schedules.append(slots)
    for prog in programs:
        prog.prologue()

    total_slots = sum(len(s) for s in schedules)
    n_churn = int(round(spec.free_churn_rate * spec.object_count))
    churn_at = {(i + 1) * total_slots // (n_churn + 1) for i in range(n_churn)} if n_churn else set()

    g_mon = 0
    hib_cursor = 0
    noise_cursor = 0
    done_slots = 0
    pending = [t for t in range(spec.threads) if schedules[t]]
    while pending:
        t = pending[rng.randrange(len(pending))] if len(pending) > 1 else pending[0]
        prog = programs[t]
        slot = schedules[t].pop()
        prog.maybe_reshape()
        if slot == "mon":
            c = g_mon % n_chains
            g_mon += 1
            step = chain_step[c]
            chain_step[c] += 1
            if step > 0 and (offsets[c] + step - 1) not in redundant_steps:
                delta = (rng.getrandbits(32) | 1)
                chain_value[c] = (chain_value[c] + delta) & mask
            prog.leaf_access(chain_addr[c], monitored, chain_value[c])
        elif slot == "junk":
            target = live[rng.randrange(len(live))]
            addr = obj_base[target] + rng.choice((0, 8))
            prog.leaf_access(addr, monitored, rng.getrandbits(64))
        elif slot == "hib":
            addr = _HIB_BASE + (hib_cursor % 32) * 16
            hib_cursor += 1
            b.region_enter(t, "gc")
            prog.leaf_access(addr, monitored, rng.getrandbits(64))
            b.region_exit(t, "gc")
        else:  # noise, opposite kind
            addr = _NOISE_BASE + (noise_cursor % 16) * 16
            noise_cursor += 1
            prog.leaf_access(addr, opposite, rng.getrandbits(64))
        if not schedules[t]:
            pending.remove(t)
        done_slots += 1
        if done_slots in churn_at and live:
            victim = live.pop(0)
            b.free(victim)
            del obj_base[victim]
            base = _OBJ_BASE + obj_slot * 0x100
            obj_slot += 1
            b.alloc(obj_id, base, 64)
            obj_base[obj_id] = base
            live.append(obj_id)
            obj_id += 1

    for prog in programs:
        prog.epilogue()
    for o in list(live):
        b.free(o)
    return b.build()


def planted_fraction_exact(spec: SynthSpec) -> Optional[float]:
    """The exact oracle fraction generate() plants, None when undefined."""
    spec.validate()
    n = spec.n_accesses
    n_noise = n // 100
    n_junk = int(round(n * spec.junk_access_fraction)) if spec.object_count else 0
    n_hib = int(round(n * spec.hibernation_window_fraction))
    n_mon = n - n_noise - n_junk - n_hib
    n_chains = min(spec.address_pool, n_mon) if n_mon else 0
    chain_len = [n_mon // n_chains + (1 if c < n_mon % n_chains else 0)
                 for c in range(n_chains)]
    successors = sum(l - 1 for l in chain_len if l > 0)
    if successors == 0:
        return None
    return round(spec.planted_fraction * successors) / successors


# ---------------------------------------------------------------------------
# case-study fixtures
# ---------------------------------------------------------------------------

def _loop_fixture(function: str, file: str, line: int, caller_file: str,
                  leaf_chain: list[tuple[str, str]], kind: str,
                  addr: int, value: int, iters: int,
                  minor_symbol: str, minor_addr: int, minor_iters: int) -> list[TraceEvent]:
    b = TraceBuilder()
    main = b.enter_py(0, "main", caller_file, 3)
    fn = b.enter_py(0, function, file, line)
    ip = _SYM_BASE + 0x9000
    for _ in range(iters):
        cids = []
        for depth, (sym, mod) in enumerate(leaf_chain):
            cids.append(b.enter_native(0, sym, mod, ip + depth * 0x100))
        b.access(0, ip + (len(leaf_chain) - 1) * 0x100 + 0x40, addr, 8, kind, value)
        for cid in reversed(cids):
            b.exit_native(0, cid)
    minor_ip = _SYM_BASE + 0xA000
    for _ in range(minor_iters):
        cid = b.enter_native(0, minor_symbol, "libnative.so", minor_ip)
        b.access(0, minor_ip + 0x40, minor_addr, 8, kind, value ^ 0x11)
        b.exit_native(0, cid)
    b.exit_py(0, fn)
    b.exit_py(0, main)
    return b.build()


def fixture_case_study(name: str) -> list[TraceEvent]:
    """Traces reproducing the structural shape of the studied applications.

    Only the shape is encoded: the reported pattern, the native symbol on
    the killing path, and the interpreted file:line of the loop.
    """
    if name == "cnn_subscript":
        # Repeated [] indexing in a convolution backprop loop: each subscript
        # call re-loads the array's data-region pointer.
        return _loop_fixture(
            function="backprop", file="conv.py", line=62, caller_file="cnn.py",
            leaf_chain=[("prepare_index", "multiarray.so"),
                        ("array_subscript", "multiarray.so")],
            kind=LOAD, addr=0x2000_0000, value=0x7F61_1000, iters=48,
            minor_symbol="array_multiply", minor_addr=0x2000_0400, minor_iters=6)
    if name == "metaheuristics_power":
        # A loop-invariant power computation: every call stores the same
        # result value back to the same slot.
        return _loop_fixture(
            function="CEC_10", file="FunctionUtil.py", line=7, caller_file="run.py",
            leaf_chain=[("LONG_power", "umath.so")],
            kind=STORE, addr=0x2100_0000, value=0x4024_0000_0000_0000, iters=48,
            minor_symbol="array_multiply", minor_addr=0x2100_0400, minor_iters=6)
    if name == "ta_adx":
        # Indexed reads of a numpy array in an indicator loop with a loop
        # dependency that blocks full vectorization.
        return _loop_fixture(
            function="adx", file="trend.py", line=6, caller_file="backtest.py",
            leaf_chain=[("array_subscript", "multiarray.so")],
            kind=LOAD, addr=0x2200_0000, value=0x7F61_2000, iters=48,
            minor_symbol="array_add", minor_addr=0x2200_0400, minor_iters=6)
    raise UnknownFixture(name)


FIXTURES = ("cnn_subscript", "metaheuristics_power", "ta_adx")
FIXTURE_MODES = {
    "cnn_subscript": "loads",
    "metaheuristics_power": "stores",
    "ta_adx": "loads",
}
