import numpy as np
import pytest

from anisoseg._backend import HAVE_NUMBA, use_backend

BACKENDS = ["numba", "numpy"] if HAVE_NUMBA else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    with use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end experiment")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results, key=lambda k: int(k.split("-")[1])):
        ok, detail = results[name]
        terminalreporter.write_line(f"{name:<6} {'PASS' if ok else 'FAIL'}  {detail}")
