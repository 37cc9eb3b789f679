from __future__ import annotations

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)$")
_outcomes: dict[tuple[int, str], str] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if match is None:
        return
    key = (int(match.group(1)), match.group(2))
    if report.failed:
        _outcomes[key] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(key, "PASS")
    elif report.skipped:
        _outcomes.setdefault(key, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), outcome in sorted(_outcomes.items()):
        terminalreporter.write_line(f"ACCEPTANCE {num:2d} {name}: {outcome}")
