"""Acceptance reporting: one PASS/FAIL line per ``criterion`` marker in the terminal summary.

A criterion whose tests were all deselected is listed as NOT RUN.
"""

import pytest

_CRITERIA = {}  # number -> [label, no failures, calls passed]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, label): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, label = mark.args
            _CRITERIA.setdefault(number, [label, True, 0])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _CRITERIA[mark.args[0]]
    if report.failed or (report.when == "call" and report.skipped):
        entry[1] = False
    elif report.when == "call" and report.passed:
        entry[2] += 1


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        label, clean, ran = _CRITERIA[number]
        status = "FAIL" if not clean else "PASS" if ran else "NOT RUN"
        terminalreporter.write_line(f"[{status}] criterion {number}: {label}")
