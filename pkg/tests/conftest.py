"""Shared fixtures and the acceptance-criteria summary.

Acceptance tests carry ``@pytest.mark.acceptance(number, title)``.  After the
run, one PASS/FAIL line per criterion is printed in the terminal summary.
"""
from __future__ import annotations

import numpy as np
import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "ran": False, "details": []})
    if rep.when == "call":
        entry["ran"] = True
        for name, value in item.user_properties:
            if name == "detail":
                entry["details"].append(str(value))
    if rep.failed:
        entry["passed"] = False
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "PASS" if e["passed"] and e["ran"] else ("FAIL" if e["ran"] else "NOT RUN")
        detail = f" ({'; '.join(e['details'])})" if e["details"] else ""
        tr.write_line(f"criterion {number:2d}: {status}  {e['title']}{detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
