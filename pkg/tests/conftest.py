"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_outcomes = {}
_STATUS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    # the call phase decides; setup failures and skips also count
    if report.when != "call" and report.outcome == "passed":
        return
    number, title = marker.args
    detail = ""
    if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
        detail = report.longrepr[2]
    if _outcomes.get(number, ("", ""))[1] != "FAIL":
        _outcomes[number] = (title, _STATUS[report.outcome], detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        title, status, detail = _outcomes[number]
        line = f"criterion {number:>2} {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
