"""Exhaustive oracle, sampling estimator, finding aggregation, rendering.

The oracle is the ground-truth mechanism: every post-filter access of the
monitored kind is armed, and each armed access is resolved by scanning
forward for the first overlapping access that the trap rules accept. It is
an independent second implementation of the detection semantics (forward
scan per access instead of a streaming watchpoint pool) and must produce
exactly the pairs of a detector run with period 1 and an unbounded pool.

Findings group pairs by (killed path, killing path) and are rendered as
dual call paths: the earlier (killed) context above the later (killing)
context, with file:line for interpreted frames and symbol@module+ip for
native frames. Output formats: human text, versioned JSON, and folded
stacks for flamegraph tooling.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

from .cct import AccessLeaf, CctTree, FrameKey, NativeFrame, PyFrame
from .detector import (
    DetectorConfig,
    DetectorCounters,
    MODE_LOADS,
    RNG_NAME,
    RedundancyPair,
    check_filters,
    pin_object,
)
from .errors import HybridMismatch
from .trace import Access, Alloc, Free, TraceEvent, replay_stacks, width_mask

REPORT_VERSION = 1
FORMATS = ("text", "json", "folded")

PATTERN_LOAD = "redundant-load"
PATTERN_STORE = "redundant-store"

_INF = float("inf")


@dataclass(slots=True)
class OracleResult:
    pairs: list[RedundancyPair]
    resolutions: int
    redundant: int
    tree: CctTree

    @property
    def fraction(self) -> float:
        return self.redundant / self.resolutions if self.resolutions else 0.0


class _AccessRec:
    __slots__ = ("idx", "seq", "hybrid", "balanced", "call_id", "ip", "addr",
                 "width", "kind", "value", "hib_open", "dropped", "inval_seq")

    def __init__(self, idx, seq, hybrid, balanced, call_id, ip, addr, width,
                 kind, value, hib_open, dropped):
        self.idx = idx
        self.seq = seq
        self.hybrid = hybrid
        self.balanced = balanced
        self.call_id = call_id
        self.ip = ip
        self.addr = addr
        self.width = width
        self.kind = kind
        self.value = value
        self.hib_open = hib_open
        self.dropped = dropped
        self.inval_seq = _INF


def oracle_pairs(
    events: Iterable[TraceEvent],
    mode: str,
    config: Optional[DetectorConfig] = None,
) -> OracleResult:
    """Exhaustively resolve every post-filter access of the monitored kind.

    The result's tree interns the paths referenced by the oracle's pairs and
    armed accesses; pair path handles resolve against it.
    """
    if config is None:
        config = DetectorConfig(mode=mode)
    elif config.mode != mode:
        config = replace(config, mode=mode)
    config.validate()

    monitored = config.monitored_kind
    loads_mode = mode == MODE_LOADS
    hib_regions = config.hibernation_regions

    recs: list[_AccessRec] = []
    # incarnation: [base, size, alloc_seq, pinned recs...]; the free seq is
    # patched into the pinned recs when (and if) the object dies.
    incarnations: list[list] = []
    live_inc: dict[int, int] = {}

    for ev, state in replay_stacks(events, strict=True):
        p = ev.payload
        tp = type(p)
        if tp is Access:
            ts = state.thread(ev.thread)
            hib_open = ts.any_region_open(hib_regions)
            dropped = False
            pinned_inc = -1
            if p.kind == monitored:
                dropped = check_filters(p, ts, state.objects, config) is not None
                if not dropped:
                    obj = pin_object(p.addr, state.objects)
                    if obj is not None:
                        pinned_inc = live_inc[obj]
            rec = _AccessRec(len(recs), ev.seq, ts.hybrid, ts.hybrid_balanced(),
                             ts.innermost_call_id(), p.ip, p.addr, p.width,
                             p.kind, p.value & width_mask(p.width),
                             hib_open, dropped)
            if pinned_inc >= 0:
                incarnations[pinned_inc].append(rec)
            recs.append(rec)
        elif tp is Alloc:
            live_inc[p.obj_id] = len(incarnations)
            incarnations.append([p.base, p.size, ev.seq])
        elif tp is Free:
            idx = live_inc.pop(p.obj_id)
            inc = incarnations[idx]
            for rec in inc[3:]:
                rec.inval_seq = ev.seq
            del inc[3:]

    # Byte-granular index over accesses that can trap in this mode.
    by_byte: dict[int, list[int]] = {}
    for rec in recs:
        if loads_mode or rec.kind == "store":
            for b in range(rec.addr, rec.addr + rec.width):
                by_byte.setdefault(b, []).append(rec.idx)

    tree = CctTree(seed=config.seed)
    site_memo: dict[tuple, object] = {}
    leaf_memo: dict[tuple[int, str], AccessLeaf] = {}

    def intern_access(rec: _AccessRec) -> int:
        node = site_memo.get(rec.hybrid)
        if node is None:
            if not rec.balanced:
                raise HybridMismatch(
                    "eval/interpreted frame counts disagree at a resolved access")
            node = tree.extend(tree.root, rec.hybrid)
            site_memo[rec.hybrid] = node
        lk = (rec.ip, rec.kind)
        leaf_key = leaf_memo.get(lk)
        if leaf_key is None:
            leaf_key = AccessLeaf(rec.ip, rec.kind)
            leaf_memo[lk] = leaf_key
        return tree.child(node, leaf_key).node_id

    pairs: list[RedundancyPair] = []
    resolutions = 0
    redundant = 0

    for rec in recs:
        if rec.kind != monitored or rec.dropped:
            continue
        killed_path = intern_access(rec)
        tree.bump_sample(tree.node(killed_path))
        bytes_ = range(rec.addr, rec.addr + rec.width)
        lists = []
        for b in bytes_:
            lst = by_byte.get(b)
            if lst:
                pos = bisect_right(lst, rec.idx)
                if pos < len(lst):
                    lists.append((lst, pos))
        heads = [(lst[pos], li) for li, (lst, pos) in enumerate(lists)]
        while heads:
            cand_idx = min(h[0] for h in heads)
            nxt_heads = []
            for val, li in heads:
                lst, pos = lists[li]
                if val == cand_idx:
                    pos += 1
                    lists[li] = (lst, pos)
                    if pos < len(lst):
                        nxt_heads.append((lst[pos], li))
                else:
                    nxt_heads.append((val, li))
            heads = nxt_heads
            cand = recs[cand_idx]
            if cand.seq > rec.inval_seq:
                break  # the pinned object was reclaimed first
            if cand.hib_open:
                break  # trap inside a blind window invalidates silently
            if loads_mode and cand.kind == "store":
                break  # store trap under load monitoring invalidates
            if cand.call_id == rec.call_id:
                continue  # same-call trap: monitor stays armed
            resolutions += 1
            if cand.width == rec.width and cand.value == rec.value:
                killing_path = intern_access(cand)
                tree.add_weight(tree.node(killing_path), 1)
                pairs.append(RedundancyPair(
                    mode=mode, addr=rec.addr, width=rec.width, value=rec.value,
                    killed_path=killed_path, killing_path=killing_path,
                    armed_seq=rec.seq, trap_seq=cand.seq, weight=1))
                redundant += 1
            break

    return OracleResult(pairs=pairs, resolutions=resolutions, redundant=redundant,
                        tree=tree)


# ---------------------------------------------------------------------------
# estimation and aggregation
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Estimate:
    resolutions_sampled: int
    redundant_sampled: int
    f_hat: Optional[float]
    extrapolated_redundant: int

    @property
    def defined(self) -> bool:
        return self.f_hat is not None


def estimate(pairs: Sequence[RedundancyPair], counters: DetectorCounters) -> Estimate:
    """Sampled redundancy fraction and weight-extrapolated redundancy count."""
    resolutions = counters.resolved_redundant + counters.resolved_nonredundant
    redundant = counters.resolved_redundant
    f_hat = redundant / resolutions if resolutions else None
    return Estimate(
        resolutions_sampled=resolutions,
        redundant_sampled=redundant,
        f_hat=f_hat,
        extrapolated_redundant=sum(p.weight for p in pairs),
    )


@dataclass(slots=True)
class Finding:
    pattern: str
    count: int
    weight: int
    killed_path: int
    killing_path: int
    killed_frames: list[FrameKey]
    killing_frames: list[FrameKey]


def frame_str(frame: FrameKey) -> str:
    t = type(frame)
    if t is PyFrame:
        return f"{frame.function} ({frame.file}:{frame.line})"
    if t is NativeFrame:
        return f"{frame.symbol} @ {frame.module}+0x{frame.ip:x}"
    return f"[{frame.kind} at ip=0x{frame.ip:x}]"


def folded_frame_str(frame: FrameKey) -> str:
    t = type(frame)
    if t is PyFrame:
        return f"{frame.function}@{frame.file}:{frame.line}"
    if t is NativeFrame:
        return f"{frame.symbol}@{frame.module}"
    return f"{frame.kind}@0x{frame.ip:x}"


def aggregate(pairs: Sequence[RedundancyPair], tree: CctTree) -> list[Finding]:
    """Group pairs by (killed, killing) path; order by weight then paths."""
    grouped: dict[tuple[int, int], list[int]] = {}
    modes: dict[tuple[int, int], str] = {}
    for p in pairs:
        key = (p.killed_path, p.killing_path)
        acc = grouped.get(key)
        if acc is None:
            grouped[key] = [1, p.weight]
            modes[key] = p.mode
        else:
            acc[0] += 1
            acc[1] += p.weight
    findings = []
    for (killed, killing), (count, weight) in grouped.items():
        killed_frames = tree.resolve_path(killed)
        killing_frames = tree.resolve_path(killing)
        pattern = PATTERN_LOAD if modes[(killed, killing)] == MODE_LOADS else PATTERN_STORE
        findings.append(Finding(pattern, count, weight, killed, killing,
                                killed_frames, killing_frames))
    findings.sort(key=lambda f: (
        -f.weight,
        tuple(frame_str(k) for k in f.killed_frames),
        tuple(frame_str(k) for k in f.killing_frames),
    ))
    return findings


@dataclass(slots=True)
class ProfileReport:
    config: DetectorConfig
    counters: DetectorCounters
    estimate: Estimate
    findings: list[Finding]
    rng_name: str = RNG_NAME


def build_report(
    pairs: Sequence[RedundancyPair],
    counters: DetectorCounters,
    config: DetectorConfig,
    tree: CctTree,
) -> ProfileReport:
    return ProfileReport(
        config=config,
        counters=counters,
        estimate=estimate(pairs, counters),
        findings=aggregate(pairs, tree),
    )


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _config_dict(report: ProfileReport) -> dict:
    c = report.config
    return {
        "mode": c.mode,
        "period": c.period,
        "watchpoints": c.watchpoints,
        "seed": c.seed,
        "rng": report.rng_name,
        "junk_header_bytes": c.junk_header_bytes,
        "hibernation_regions": sorted(c.hibernation_regions),
        "excluded_ip_ranges": [[f"0x{lo:x}", f"0x{hi:x}"] for lo, hi in c.excluded_ip_ranges],
    }


def _counters_dict(c: DetectorCounters) -> dict:
    return {
        "accesses_seen": c.accesses_seen,
        "candidates": c.candidates,
        "filtered_ip": c.filtered_ip,
        "filtered_junk": c.filtered_junk,
        "filtered_hibernation": c.filtered_hibernation,
        "reservoir_offered": c.reservoir_offered,
        "armed": c.armed,
        "evicted_by_reservoir": c.evicted_by_reservoir,
        "disarmed_by_store_trap": c.disarmed_by_store_trap,
        "disarmed_by_free": c.disarmed_by_free,
        "disarmed_by_hibernation": c.disarmed_by_hibernation,
        "resolved_redundant": c.resolved_redundant,
        "resolved_nonredundant": c.resolved_nonredundant,
        "unresolved_at_end": c.unresolved_at_end,
    }


def _frame_dict(frame: FrameKey) -> dict:
    t = type(frame)
    if t is PyFrame:
        return {"type": "py", "function": frame.function, "file": frame.file,
                "line": frame.line}
    if t is NativeFrame:
        return {"type": "native", "symbol": frame.symbol, "module": frame.module,
                "ip": f"0x{frame.ip:x}"}
    return {"type": "access", "kind": frame.kind, "ip": f"0x{frame.ip:x}"}


def report_to_dict(report: ProfileReport) -> dict:
    est = report.estimate
    return {
        "report_version": REPORT_VERSION,
        "config": _config_dict(report),
        "counters": _counters_dict(report.counters),
        "estimate": {
            "resolutions_sampled": est.resolutions_sampled,
            "redundant_sampled": est.redundant_sampled,
            "f_hat": est.f_hat,
            "defined": est.defined,
            "extrapolated_redundant": est.extrapolated_redundant,
        },
        "findings": [
            {
                "pattern": f.pattern,
                "count": f.count,
                "weight": f.weight,
                "killed_path": [_frame_dict(k) for k in f.killed_frames],
                "killing_path": [_frame_dict(k) for k in f.killing_frames],
            }
            for f in report.findings
        ],
    }


def _path_lines(frames: Sequence[FrameKey], indent: str) -> list[str]:
    """Frame lines with a marker at the innermost interpreted/native edge."""
    last_py = -1
    for i, frame in enumerate(frames):
        if type(frame) is PyFrame:
            last_py = i
    lines = []
    for i, frame in enumerate(frames):
        if i == last_py + 1 and last_py >= 0:
            lines.append(f"{indent}--- python/native boundary ---")
        lines.append(f"{indent}{frame_str(frame)}")
    return lines


def _render_text(report: ProfileReport) -> str:
    c = report.config
    est = report.estimate
    lines = [
        f"memory redundancy report (mode={c.mode})",
        (f"rng={report.rng_name} seed={c.seed} period={c.period} "
         f"watchpoints={c.watchpoints} junk_header_bytes={c.junk_header_bytes} "
         f"hibernate={','.join(sorted(c.hibernation_regions)) or '-'}"),
    ]
    cd = _counters_dict(report.counters)
    lines.append("counters: " + " ".join(f"{k}={v}" for k, v in cd.items()))
    if est.defined:
        lines.append(
            f"estimate: f_hat={est.f_hat:.6f} "
            f"({est.redundant_sampled}/{est.resolutions_sampled} sampled resolutions) "
            f"extrapolated_redundant={est.extrapolated_redundant}")
    else:
        lines.append("estimate: undefined (no sampled resolutions)")
    lines.append("")
    if not report.findings:
        lines.append("no redundancies detected")
    for i, f in enumerate(report.findings, start=1):
        lines.append(f"finding #{i}: pattern={f.pattern} count={f.count} weight={f.weight}")
        lines.append("  killed path (earlier access):")
        lines.extend(_path_lines(f.killed_frames, "    "))
        lines.append("  killing path (later access):")
        lines.extend(_path_lines(f.killing_frames, "    "))
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def _render_folded(report: ProfileReport) -> str:
    weights: dict[str, int] = {}
    for f in report.findings:
        stack = ";".join(folded_frame_str(k) for k in f.killing_frames)
        weights[stack] = weights.get(stack, 0) + f.weight
    ordered = sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))
    return "".join(f"{stack} {weight}\n" for stack, weight in ordered)


def render(report: ProfileReport, fmt: str = "text") -> bytes:
    """Byte-deterministic rendering of a report in one of FORMATS."""
    if fmt == "text":
        return _render_text(report).encode()
    if fmt == "json":
        return (json.dumps(report_to_dict(report), indent=2, sort_keys=False) + "\n").encode()
    if fmt == "folded":
        return _render_folded(report).encode()
    raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
