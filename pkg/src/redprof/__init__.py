"""Trace-driven detection of redundant loads and stores across native-call
boundaries, with an emulated hardware sampler, a watchpoint pool under
reservoir replacement, and a process-wide hybrid calling context tree."""

__version__ = "0.1.0"

from .analysis import build_report, estimate, aggregate, oracle_pairs, render
from .cct import CctTree, merge_hybrid_path
from .detector import DetectorConfig, run_detector
from .synth import SynthSpec, fixture_case_study, generate
from .trace import read_trace, replay_stacks, validate_trace, write_trace

__all__ = [
    "__version__",
    "aggregate",
    "build_report",
    "CctTree",
    "DetectorConfig",
    "estimate",
    "fixture_case_study",
    "generate",
    "merge_hybrid_path",
    "oracle_pairs",
    "read_trace",
    "render",
    "replay_stacks",
    "run_detector",
    "SynthSpec",
    "validate_trace",
    "write_trace",
]
