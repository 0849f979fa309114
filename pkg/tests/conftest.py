import numpy as np
import pytest

from rseq import numerics as nx


@pytest.fixture(autouse=True)
def _fresh_numerics():
    nx.set_default_dtype("f32")
    nx.clear_tape()
    yield
    nx.set_default_dtype("f32")
    nx.clear_tape()


@pytest.fixture
def f64():
    with nx.precision("f64"):
        yield


def max_abs(a, b) -> float:
    a = a.data if isinstance(a, nx.Tensor) else np.asarray(a)
    b = b.data if isinstance(b, nx.Tensor) else np.asarray(b)
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


_ACCEPTANCE: dict[int, str] = {}


def _criterion(nodeid: str):
    if "test_acceptance.py::test_criterion_" not in nodeid:
        return None
    return int(nodeid.split("test_criterion_")[1][:2])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    n = _criterion(item.nodeid)
    if n is None or rep.when != "call":
        return
    results = getattr(item.module, "RESULTS", {})
    if n in results:
        _ACCEPTANCE[n] = results[n]
    else:
        _ACCEPTANCE[n] = f"criterion {n:>2}: {'PASS' if rep.passed else 'FAIL'}  (no report: {rep.outcome})"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
