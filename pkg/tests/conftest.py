"""Shared pytest plumbing.

The acceptance battery in test_acceptance.py gets one verdict line per
numbered criterion, printed in a dedicated section after the normal test
summary so a run's guarantees can be read off directly.
"""
import re

import pytest

_CRITERION = re.compile(r"test_criterion_(\d+)")
_lines: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance.py" not in item.nodeid:
        return
    match = _CRITERION.match(item.name)
    if not match:
        return
    num = int(match.group(1))
    doc = item.function.__doc__ or item.name
    label = doc.strip().splitlines()[0]
    verdict = "PASS" if report.passed else "FAIL"
    _lines[num] = f"{verdict} criterion {num}: {label}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _lines:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(_lines):
        terminalreporter.write_line(_lines[num])
