import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_outcomes: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        _outcomes.setdefault(int(match.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        results = _outcomes[number]
        if all(r == "passed" for r in results):
            verdict = "PASS"
        elif "failed" in results:
            verdict = "FAIL"
        else:
            verdict = "SKIP"
        terminalreporter.write_line(f"{verdict} criterion {number} ({len(results)} checks)")
