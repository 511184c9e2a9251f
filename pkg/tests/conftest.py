"""Shared fixtures and the acceptance-criterion summary.

Tests marked ``@pytest.mark.criterion(n)`` feed a per-criterion verdict that
is printed as one ``PASS``/``FAIL`` line each at the end of the run. A
criterion passes only if every test carrying its marker passed.
"""
from __future__ import annotations

import numpy as np
import pytest

from jlcm import kernels

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    entry = CRITERIA.setdefault(marker.args[0], {"ok": True, "tests": [], "notes": []})
    passed = rep.passed and not hasattr(rep, "wasxfail")
    entry["ok"] = entry["ok"] and passed
    entry["tests"].append(item.name)
    if not passed:
        entry["notes"].append(f"{item.name}: {'xfail' if hasattr(rep, 'wasxfail') else rep.outcome}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        entry = CRITERIA[n]
        verdict = "PASS" if entry["ok"] else "FAIL"
        extra = f"  ({'; '.join(entry['notes'])})" if entry["notes"] else ""
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}{extra}")


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Each kernel backend that imports on this machine."""
    return kernels.load_backend(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
