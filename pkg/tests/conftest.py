from __future__ import annotations

import re

import numpy as np
import pytest
from hypothesis import settings

from conic_xray.conic_manifold import ConicMetric
from conic_xray.geodesic_flow import certify
from conic_xray.link_geometry import LinkMetric

settings.register_profile("default", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def cone_sphere():
    """Exact cone over the unit sphere, certified."""
    m = ConicMetric(LinkMetric.round_sphere(1.0), 0.5)
    certify(m)
    return m


@pytest.fixture(scope="session")
def cone_circle():
    m = ConicMetric(LinkMetric.circle(1.0), 0.5)
    certify(m)
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 13
_CRITERION_ID = re.compile(r"test_criterion_(\d+)")
_results: dict = {}


def pytest_configure(config):
    config.stash[ACCEPTANCE] = _results


@pytest.fixture
def criterion():
    """``record(n, ok, detail)`` prints one verdict line and keeps it for the session summary."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _results[n] = line
        print(line)
        return ok

    return record


def pytest_runtest_logreport(report):
    m = _CRITERION_ID.search(report.nodeid)
    if m is None or report.when != "call":
        return
    n = int(m.group(1))
    if report.failed and n not in _results:
        _results[n] = f"criterion {n:2d}: FAIL  raised before a verdict (see traceback)"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(results.get(n, f"criterion {n:2d}: NOT RUN"))
