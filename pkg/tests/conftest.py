"""Shared pytest wiring: per-criterion PASS/FAIL summary for the gate tests.

tests/test_acceptance.py defines one test per numbered acceptance criterion
(test_criterion_01 ... test_criterion_10).  This hook collects their outcomes
across all phases (a fixture error counts as a failure) and prints one
PASS/FAIL line per criterion at the end of the run.
"""

import re

CRITERIA = {
    1: "temperature-scaled softmax suite",
    2: "distillation-loss oracle",
    3: "attention suite",
    4: "analytic-vs-numeric gradient checks",
    5: "frozen-head checksum contract",
    6: "class-activation-map suite and localization",
    7: "surrogate-explainer oracle suite",
    8: "end-to-end pipeline floors and runtime",
    9: "rerun byte-reproducibility",
    10: "story audience contract",
}

_NODE_RE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_RANK = {"PASS": 0, "SKIP": 1, "FAIL": 2}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    status: dict[int, str] = {}
    for category, outcome in (
        ("passed", "PASS"),
        ("failed", "FAIL"),
        ("error", "FAIL"),
        ("skipped", "SKIP"),
    ):
        for rep in terminalreporter.stats.get(category, []):
            m = _NODE_RE.search(getattr(rep, "nodeid", ""))
            if not m:
                continue
            num = int(m.group(1))
            prev = status.get(num)
            if prev is None or _RANK[outcome] > _RANK[prev]:
                status[num] = outcome
    if not status:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(status):
        terminalreporter.write_line(
            f"criterion {num:2d}  {status[num]:4s}  {CRITERIA.get(num, '?')}"
        )
