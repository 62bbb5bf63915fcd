"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_RESULTS = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _RESULTS[int(match.group(1))] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        outcome, detail = _RESULTS[number]
        status = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        line = f"criterion {number}: {status}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
