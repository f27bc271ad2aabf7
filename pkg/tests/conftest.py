import numpy as np
import pytest

from mote import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["python", "compiled"])
def backend(request):
    if request.param == "compiled" and not kernels.compiled_available():
        pytest.skip("compiled kernels not built")
    prev = kernels.BACKEND
    kernels.use(request.param)
    yield request.param
    kernels.use(prev)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; fails the test when the criterion fails."""

    def record(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
