"""Benchmark scenarios, reports and the randomized soundness campaign."""

from .fuzz import Verdict, Violation, fuzz_campaign
from .report import emit_report, parse_tsv, to_json, to_tsv
from .scenario import (
    Fault, Kind, Mode, Ordering, Report, Row, Scenario, Verb, load_scenario, parse_sizes,
    run_scenario, scenario_from_kv,
)

__all__ = [
    "Fault", "Kind", "Mode", "Ordering", "Report", "Row", "Scenario", "Verb", "Verdict",
    "Violation", "emit_report", "fuzz_campaign", "load_scenario", "parse_sizes", "parse_tsv",
    "run_scenario", "scenario_from_kv", "to_json", "to_tsv",
]
