"""Command line interface: analyze, oracle, synth, validate, compare.

Exit codes: 0 success, 2 bad flags, 3 malformed trace, 4 internal
invariant violation. All configuration comes from flags (never from the
environment) so every invocation is reproducible from its command line.
"""

from __future__ import annotations

import argparse
import json
import sys

from .analysis import FORMATS, build_report, oracle_pairs, render
from .cct import CctTree
from .detector import (
    DEFAULT_JUNK_HEADER_BYTES,
    DEFAULT_PERIOD,
    DEFAULT_WATCHPOINTS,
    DetectorConfig,
    MODES,
    run_detector,
)
from .errors import InternalInvariant, InvalidConfig, InvalidSpec, TraceError, UnknownFixture
from .synth import FIXTURES, SynthSpec, fixture_case_study, generate
from .trace import read_trace, validate_trace, write_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BAD_TRACE = 3
EXIT_INTERNAL = 4


def _parse_ip_range(text: str) -> tuple[int, int]:
    try:
        lo_s, hi_s = text.split(":", 1)
        return int(lo_s, 0), int(hi_s, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected LO:HI (decimal or 0x-hex), got {text!r}") from None


def _parse_regions(text: str) -> frozenset[str]:
    if not text or text == "-":
        return frozenset()
    return frozenset(part.strip() for part in text.split(",") if part.strip())


def _add_detector_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", required=True, choices=MODES,
                   help="which redundancy pattern to detect")
    p.add_argument("--period", type=int, default=DEFAULT_PERIOD,
                   help=f"sampling period between candidates (default {DEFAULT_PERIOD})")
    p.add_argument("--watchpoints", type=int, default=DEFAULT_WATCHPOINTS,
                   help=f"simultaneously armed monitors (default {DEFAULT_WATCHPOINTS})")
    p.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    p.add_argument("--exclude-ip", type=_parse_ip_range, action="append", default=[],
                   metavar="LO:HI", help="drop samples whose code address is in [LO, HI)")
    p.add_argument("--junk-bytes", type=int, default=DEFAULT_JUNK_HEADER_BYTES,
                   help="object header bytes masked from sampling (default "
                        f"{DEFAULT_JUNK_HEADER_BYTES})")
    p.add_argument("--hibernate", type=_parse_regions, default=frozenset({"gc", "loader"}),
                   metavar="TAGS", help="comma-separated region tags that suspend "
                   "the profiler (default gc,loader)")


def _config_from_args(args) -> DetectorConfig:
    return DetectorConfig(
        mode=args.mode,
        period=args.period,
        watchpoints=args.watchpoints,
        seed=args.seed,
        excluded_ip_ranges=tuple(args.exclude_ip),
        junk_header_bytes=args.junk_bytes,
        hibernation_regions=args.hibernate,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redprof",
        description="Trace-driven detector of redundant loads and stores "
                    "across native-call boundaries.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="run the sampling detector and render a report")
    p.add_argument("trace", help="trace file to analyze")
    _add_detector_flags(p)
    p.add_argument("--format", choices=FORMATS, default="text")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")

    p = sub.add_parser("oracle", help="exhaustive ground-truth pairs (json)")
    p.add_argument("trace")
    _add_detector_flags(p)
    p.add_argument("--out", default=None)

    p = sub.add_parser("synth", help="generate a synthetic trace with planted redundancy")
    p.add_argument("--out", required=True)
    p.add_argument("--fixture", choices=FIXTURES, default=None,
                   help="emit a named case-study fixture instead of a generated trace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--accesses", type=int, default=10_000)
    p.add_argument("--mode", choices=MODES, default="stores",
                   help="access kind the planted chains use")
    p.add_argument("--fraction", type=float, default=0.3,
                   help="planted redundancy fraction (default 0.3)")
    p.add_argument("--addresses", type=int, default=64)
    p.add_argument("--call-depth", type=int, default=4)
    p.add_argument("--fanout", type=int, default=3)
    p.add_argument("--eval-ratio", type=float, default=0.5)
    p.add_argument("--junk-fraction", type=float, default=0.05)
    p.add_argument("--hibernation-fraction", type=float, default=0.05)
    p.add_argument("--objects", type=int, default=8)
    p.add_argument("--churn", type=float, default=0.1)

    p = sub.add_parser("validate", help="check every trace invariant")
    p.add_argument("trace")

    p = sub.add_parser("compare", help="sampled estimate vs. exact fraction per seed")
    p.add_argument("trace")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--period", type=int, default=DEFAULT_PERIOD)
    p.add_argument("--watchpoints", type=int, default=DEFAULT_WATCHPOINTS)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..k-1")
    p.add_argument("--junk-bytes", type=int, default=DEFAULT_JUNK_HEADER_BYTES)
    p.add_argument("--hibernate", type=_parse_regions, default=frozenset({"gc", "loader"}))

    return parser


def _emit(data: bytes, out_path) -> None:
    if out_path is None:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
    else:
        with open(out_path, "wb") as fh:
            fh.write(data)


def _cmd_analyze(args) -> int:
    config = _config_from_args(args)
    events = list(read_trace(args.trace))
    tree = CctTree(seed=config.seed)
    pairs, counters = run_detector(events, config, tree)
    report = build_report(pairs, counters, config, tree)
    _emit(render(report, args.format), args.out)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    config = _config_from_args(args)
    events = list(read_trace(args.trace))
    result = oracle_pairs(events, args.mode, config)
    payload = {
        "mode": args.mode,
        "resolutions": result.resolutions,
        "redundant": result.redundant,
        "fraction": result.fraction,
        "pairs": [
            {"armed_seq": p.armed_seq, "trap_seq": p.trap_seq,
             "addr": f"0x{p.addr:x}", "width": p.width, "value": f"0x{p.value:x}"}
            for p in result.pairs
        ],
    }
    _emit((json.dumps(payload, indent=2) + "\n").encode(), args.out)
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.fixture is not None:
        events = fixture_case_study(args.fixture)
    else:
        spec = SynthSpec(
            seed=args.seed,
            threads=args.threads,
            n_accesses=args.accesses,
            mode_targeted=args.mode,
            planted_fraction=args.fraction,
            address_pool=args.addresses,
            call_depth=args.call_depth,
            call_fanout=args.fanout,
            eval_frame_ratio=args.eval_ratio,
            junk_access_fraction=args.junk_fraction,
            hibernation_window_fraction=args.hibernation_fraction,
            object_count=args.objects,
            free_churn_rate=args.churn,
        )
        events = generate(spec)
    write_trace(events, args.out)
    print(f"wrote {len(events)} events to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    events = list(read_trace(args.trace))
    report = validate_trace(events)
    if report.ok:
        print(f"ok: {len(events)} events, 0 violations")
        return EXIT_OK
    for v in report.violations:
        print(f"seq={v.seq} category={v.category} detail={v.detail}")
    print(f"{len(report.violations)} violation(s)")
    return 1


def _cmd_compare(args) -> int:
    events = list(read_trace(args.trace))
    oracle = oracle_pairs(events, args.mode, DetectorConfig(
        mode=args.mode, junk_header_bytes=args.junk_bytes,
        hibernation_regions=args.hibernate))
    f_exact = oracle.fraction
    print(f"oracle: resolutions={oracle.resolutions} redundant={oracle.redundant} "
          f"f={f_exact:.6f}")
    print(f"{'seed':>6} {'resolutions':>12} {'f_hat':>10} {'abs_err':>10}")
    errors = []
    for seed in range(args.seeds):
        config = DetectorConfig(
            mode=args.mode, period=args.period, watchpoints=args.watchpoints,
            seed=seed, junk_header_bytes=args.junk_bytes,
            hibernation_regions=args.hibernate)
        tree = CctTree(seed=seed)
        pairs, counters = run_detector(events, config, tree)
        resolutions = counters.resolved_redundant + counters.resolved_nonredundant
        if resolutions:
            f_hat = counters.resolved_redundant / resolutions
            err = abs(f_hat - f_exact)
            errors.append(err)
            print(f"{seed:>6} {resolutions:>12} {f_hat:>10.6f} {err:>10.6f}")
        else:
            print(f"{seed:>6} {resolutions:>12} {'undef':>10} {'-':>10}")
    if errors:
        print(f"mean_abs_err={sum(errors) / len(errors):.6f} over {len(errors)} defined seeds")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "analyze": _cmd_analyze,
        "oracle": _cmd_oracle,
        "synth": _cmd_synth,
        "validate": _cmd_validate,
        "compare": _cmd_compare,
    }
    try:
        return handlers[args.command](args)
    except (InvalidConfig, InvalidSpec, UnknownFixture) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TraceError as e:
        print(f"trace error: {e}", file=sys.stderr)
        return EXIT_BAD_TRACE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_BAD_TRACE
    except InternalInvariant as e:
        print(f"internal invariant violated (bug): {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
