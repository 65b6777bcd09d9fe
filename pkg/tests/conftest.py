"""Per-criterion reporting for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, title=...)`` are grouped by ``n``;
after the run one PASS/FAIL line per criterion goes to the terminal summary,
followed by any values the tests stored with ``record_property``.
"""
from collections import defaultdict

import pytest

_outcomes = defaultdict(list)
_titles = {}
_measured = defaultdict(list)


def pytest_itemcollected(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        _titles.setdefault(mark.args[0], mark.kwargs.get("title", ""))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    report = outcome.get_result()
    # setup/teardown errors count as failures too
    if report.when == "call" or report.outcome != "passed":
        _outcomes[mark.args[0]].append(report.outcome)
    if report.when == "call":
        _measured[mark.args[0]].extend(report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_outcomes):
        verdict = "PASS" if all(r == "passed" for r in _outcomes[num]) else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {_titles.get(num, '')}")
        for key, value in _measured[num]:
            terminalreporter.write_line(f"              {key} = {value}")
