import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel(a, b):
    """Relative difference, scaled by the larger magnitude."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


# -- acceptance summary: one PASS/FAIL line per criterion -------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_runtest_logreport(report):
    n = _CRITERIA_BY_NODE.get(report.nodeid)
    if n is None:
        return
    state = _CRITERIA.setdefault(n, set())
    if report.skipped:
        state.add("skip")
    elif report.failed:
        state.add("fail")
    elif report.when == "call":
        state.add("pass")


_CRITERIA_BY_NODE = {}
_DETAILS = {}


@pytest.fixture
def note(request):
    """Attach a measurement to the criterion's summary line."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        _DETAILS.setdefault(mark.args[0], []).append(text)
        print(text)
    return add


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _CRITERIA_BY_NODE[item.nodeid] = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        state = _CRITERIA[n]
        verdict = "FAIL" if "fail" in state else "PASS" if "pass" in state else "SKIP"
        detail = "; ".join(_DETAILS.get(n, []))
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}" + (f"  ({detail})" if detail else ""))
