"""Redundant-access detection over a replayed trace.

Emulates a period-based hardware sampler feeding a small pool of watchpoint
monitors. Every access of the monitored kind ticks a counter; each period-th
one is a candidate. Candidates pass an instruction filter, a junk-header
filter, and a hibernation check, then compete for a watchpoint slot under
reservoir replacement so that each offered candidate has a uniform chance
of being retained. An armed watchpoint records the address range, the
masked value, and the full hybrid call path; any later access overlapping
the range traps and is resolved:

  stores mode: only stores trap. A trap from the same native call instance
    keeps the watchpoint armed (reporting it would evict the monitor and
    hide a genuine later cross-call pair). A cross-call store with an equal
    masked value emits a redundancy pair; an unequal one disarms silently.

  loads mode: loads and stores both trap. Store traps never emit; they
    invalidate the recorded value and disarm. Load traps follow the same
    same-call / cross-call rules as stores mode.

Safeguards: a candidate inside an open hibernation region is dropped; a
trap fired while hibernation is open silently disarms (no pair may span a
blind window). Arming pins the live object containing the address, and a
Free of a pinned object disarms first, so no monitor ever refers to freed
memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .cct import AccessLeaf, CctTree
from .errors import HybridMismatch, InternalInvariant, InvalidConfig
from .trace import (
    Access,
    Free,
    LiveObjects,
    ThreadStacks,
    TraceEvent,
    replay_stacks,
    width_mask,
)

MODE_LOADS = "loads"
MODE_STORES = "stores"
MODES = (MODE_LOADS, MODE_STORES)

RNG_NAME = "pcg64"

FILTERED_IP = "ip"
FILTERED_JUNK = "junk"
FILTERED_HIBERNATION = "hibernation"

DEFAULT_PERIOD = 1_000_000
DEFAULT_WATCHPOINTS = 4
DEFAULT_JUNK_HEADER_BYTES = 16
DEFAULT_HIBERNATION_REGIONS = frozenset({"gc", "loader"})


@dataclass(slots=True)
class DetectorConfig:
    mode: str
    period: int = DEFAULT_PERIOD
    watchpoints: int = DEFAULT_WATCHPOINTS
    seed: int = 0
    excluded_ip_ranges: tuple[tuple[int, int], ...] = ()
    junk_header_bytes: int = DEFAULT_JUNK_HEADER_BYTES
    hibernation_regions: frozenset[str] = DEFAULT_HIBERNATION_REGIONS

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.period < 1:
            raise InvalidConfig(f"period must be >= 1, got {self.period}")
        if self.watchpoints < 1:
            raise InvalidConfig(f"watchpoints must be >= 1, got {self.watchpoints}")
        if self.junk_header_bytes < 0:
            raise InvalidConfig("junk_header_bytes must be >= 0")
        for lo, hi in self.excluded_ip_ranges:
            if lo >= hi:
                raise InvalidConfig(f"excluded ip range [0x{lo:x}, 0x{hi:x}) is empty")

    @property
    def monitored_kind(self) -> str:
        return "store" if self.mode == MODE_STORES else "load"


@dataclass(slots=True, eq=False)  # identity semantics: each arm is distinct
class Watchpoint:
    addr: int
    width: int
    value: int  # masked to width
    armed_seq: int
    armed_call_id: Optional[int]
    armed_path: int
    pinned_obj: Optional[int] = None
    slot: int = -1  # position in the armed list, maintained by the pool


@dataclass(slots=True)
class RedundancyPair:
    mode: str
    addr: int
    width: int
    value: int
    killed_path: int
    killing_path: int
    armed_seq: int
    trap_seq: int
    weight: int


@dataclass(slots=True)
class DetectorCounters:
    accesses_seen: int = 0
    candidates: int = 0
    filtered_ip: int = 0
    filtered_junk: int = 0
    filtered_hibernation: int = 0
    reservoir_offered: int = 0
    armed: int = 0
    evicted_by_reservoir: int = 0
    disarmed_by_store_trap: int = 0
    disarmed_by_free: int = 0
    disarmed_by_hibernation: int = 0
    resolved_redundant: int = 0
    resolved_nonredundant: int = 0
    unresolved_at_end: int = 0

    def check(self) -> None:
        """Every armed watchpoint must meet exactly one fate."""
        fates = (self.resolved_redundant + self.resolved_nonredundant
                 + self.evicted_by_reservoir + self.disarmed_by_store_trap
                 + self.disarmed_by_free + self.disarmed_by_hibernation
                 + self.unresolved_at_end)
        if self.armed != fates:
            raise InternalInvariant(
                f"armed={self.armed} but accounted fates={fates}")


class ReservoirDecision(NamedTuple):
    action: str  # "keep" | "keep_evict" | "discard"
    victim: Optional[int]


def reservoir_decide(offered: int, capacity: int, free_slots: int, rng) -> ReservoirDecision:
    """Algorithm-R style replacement giving each offer a W/M retention chance.

    offered is the running count M of samples offered so far (including the
    current one). With a free slot the offer is always kept; at capacity it
    replaces a uniformly random victim with probability capacity/offered.
    """
    if offered < 1:
        raise InvalidConfig("offered count must be >= 1")
    if free_slots > 0:
        return ReservoirDecision("keep", None)
    if rng.random() < capacity / offered:
        return ReservoirDecision("keep_evict", int(rng.integers(0, capacity)))
    return ReservoirDecision("discard", None)


def check_filters(
    access: Access,
    stacks: ThreadStacks,
    live_objects: LiveObjects,
    config: DetectorConfig,
) -> Optional[str]:
    """First matching drop reason in normative order, or None to pass."""
    ip = access.ip
    for lo, hi in config.excluded_ip_ranges:
        if lo <= ip < hi:
            return FILTERED_IP
    if config.junk_header_bytes > 0:
        obj = live_objects.find(access.addr)
        if obj is not None:
            base = live_objects.range_of(obj)[0]
            if access.addr - base < config.junk_header_bytes:
                return FILTERED_JUNK
    if stacks.any_region_open(config.hibernation_regions):
        return FILTERED_HIBERNATION
    return None


def pin_object(addr: int, live_objects: LiveObjects) -> Optional[int]:
    """The live object whose range contains addr, or None (raw memory)."""
    return live_objects.find(addr)


class _Pool:
    """Armed watchpoints with a byte-granular overlap index."""

    __slots__ = ("armed", "by_byte", "by_obj")

    def __init__(self):
        self.armed: list[Watchpoint] = []
        self.by_byte: dict[int, dict[Watchpoint, None]] = {}
        self.by_obj: dict[int, dict[Watchpoint, None]] = {}

    def arm(self, wp: Watchpoint) -> None:
        wp.slot = len(self.armed)
        self.armed.append(wp)
        by_byte = self.by_byte
        for b in range(wp.addr, wp.addr + wp.width):
            bucket = by_byte.get(b)
            if bucket is None:
                by_byte[b] = {wp: None}
            else:
                bucket[wp] = None
        if wp.pinned_obj is not None:
            self.by_obj.setdefault(wp.pinned_obj, {})[wp] = None

    def disarm(self, wp: Watchpoint) -> None:
        last = self.armed[-1]
        self.armed[wp.slot] = last
        last.slot = wp.slot
        self.armed.pop()
        by_byte = self.by_byte
        for b in range(wp.addr, wp.addr + wp.width):
            bucket = by_byte[b]
            del bucket[wp]
            if not bucket:
                del by_byte[b]
        if wp.pinned_obj is not None:
            bucket = self.by_obj[wp.pinned_obj]
            del bucket[wp]
            if not bucket:
                del self.by_obj[wp.pinned_obj]

    def overlapping(self, addr: int, width: int) -> list[Watchpoint]:
        by_byte = self.by_byte
        hits: dict[Watchpoint, None] = {}
        for b in range(addr, addr + width):
            bucket = by_byte.get(b)
            if bucket:
                hits.update(bucket)
        if len(hits) > 1:
            return sorted(hits, key=lambda w: w.armed_seq)
        return list(hits)

    def pinned_to(self, obj_id: int) -> list[Watchpoint]:
        bucket = self.by_obj.get(obj_id)
        return list(bucket) if bucket else []


def _intern_site(tree: CctTree, ts: ThreadStacks, memo: dict):
    """Tree node for the thread's current hybrid call path (memoized)."""
    key = ts.hybrid
    node = memo.get(key)
    if node is None:
        if not ts.hybrid_balanced():
            raise HybridMismatch(
                f"{len(ts.eval_slots)} eval frames but {len(ts.py)} interpreted frames "
                "at a sampled access")
        node = tree.extend(tree.root, key)
        memo[key] = node
    return node


def run_detector(
    events: Iterable[TraceEvent],
    config: DetectorConfig,
    tree: CctTree,
) -> tuple[list[RedundancyPair], DetectorCounters]:
    """Run one detection pass; deterministic for a fixed (trace, config).

    The tree receives exactly the paths of armed samples and emitted pairs.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    pool = _Pool()
    pairs: list[RedundancyPair] = []
    counters = DetectorCounters()

    loads_mode = config.mode == MODE_LOADS
    monitored = config.monitored_kind
    period = config.period
    capacity = config.watchpoints
    hib_regions = config.hibernation_regions
    weight = period

    site_memo: dict = {}
    leaf_memo: dict[tuple[int, str], AccessLeaf] = {}

    accesses_seen = 0
    tick = 0
    offered = 0

    for ev, state in replay_stacks(events, strict=True):
        p = ev.payload
        tp = type(p)
        if tp is Access:
            accesses_seen += 1
            same_call_trapped = False

            # Trap phase: armed monitors fire on any overlapping access of a
            # trapping kind, independent of the sampling period.
            if pool.armed:
                is_store = p.kind == "store"
                if loads_mode or is_store:
                    hits = pool.overlapping(p.addr, p.width)
                    if hits:
                        ts = state.thread(ev.thread)
                        cur_call = ts.innermost_call_id()
                        hib_open = ts.any_region_open(hib_regions)
                        masked = p.value & width_mask(p.width)
                        for wp in hits:
                            if hib_open:
                                pool.disarm(wp)
                                counters.disarmed_by_hibernation += 1
                                continue
                            if loads_mode and is_store:
                                pool.disarm(wp)
                                counters.disarmed_by_store_trap += 1
                                continue
                            if wp.armed_call_id == cur_call:
                                same_call_trapped = True
                                continue
                            if wp.width == p.width and wp.value == masked:
                                site = _intern_site(tree, ts, site_memo)
                                lk = (p.ip, p.kind)
                                leaf_key = leaf_memo.get(lk)
                                if leaf_key is None:
                                    leaf_key = AccessLeaf(p.ip, p.kind)
                                    leaf_memo[lk] = leaf_key
                                leaf = tree.child(site, leaf_key)
                                tree.add_weight(leaf, weight)
                                pairs.append(RedundancyPair(
                                    mode=config.mode, addr=wp.addr, width=wp.width,
                                    value=wp.value, killed_path=wp.armed_path,
                                    killing_path=leaf.node_id, armed_seq=wp.armed_seq,
                                    trap_seq=ev.seq, weight=weight))
                                counters.resolved_redundant += 1
                            else:
                                counters.resolved_nonredundant += 1
                            pool.disarm(wp)

            # Sampling phase.
            if p.kind == monitored:
                tick += 1
                if tick % period == 0:
                    counters.candidates += 1
                    ts = state.thread(ev.thread)
                    reason = check_filters(p, ts, state.objects, config)
                    if reason is FILTERED_IP:
                        counters.filtered_ip += 1
                    elif reason is FILTERED_JUNK:
                        counters.filtered_junk += 1
                    elif reason is FILTERED_HIBERNATION:
                        counters.filtered_hibernation += 1
                    else:
                        offered += 1
                        counters.reservoir_offered += 1
                        free_slots = capacity - len(pool.armed)
                        if free_slots > 0:
                            decision = ReservoirDecision("keep", None)
                        elif same_call_trapped:
                            # A same-call trap must never evict: the armed
                            # monitor is still waiting for its cross-call
                            # resolution.
                            decision = ReservoirDecision("discard", None)
                        else:
                            decision = reservoir_decide(offered, capacity, free_slots, rng)
                        if decision.action == "keep_evict":
                            pool.disarm(pool.armed[decision.victim])
                            counters.evicted_by_reservoir += 1
                        if decision.action != "discard":
                            site = _intern_site(tree, ts, site_memo)
                            lk = (p.ip, p.kind)
                            leaf_key = leaf_memo.get(lk)
                            if leaf_key is None:
                                leaf_key = AccessLeaf(p.ip, p.kind)
                                leaf_memo[lk] = leaf_key
                            leaf = tree.child(site, leaf_key)
                            tree.bump_sample(leaf)
                            wp = Watchpoint(
                                addr=p.addr, width=p.width,
                                value=p.value & width_mask(p.width),
                                armed_seq=ev.seq,
                                armed_call_id=ts.innermost_call_id(),
                                armed_path=leaf.node_id,
                                pinned_obj=pin_object(p.addr, state.objects))
                            pool.arm(wp)
                            counters.armed += 1
        elif tp is Free:
            # Disarm before the reclamation applies: monitors never outlive
            # the object they pinned.
            for wp in pool.pinned_to(p.obj_id):
                pool.disarm(wp)
                counters.disarmed_by_free += 1

    counters.unresolved_at_end = len(pool.armed)
    counters.accesses_seen = accesses_seen
    counters.check()
    return pairs, counters
