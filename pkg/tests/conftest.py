import numpy as np
import pytest

from reliavatar import numcore as nc


@pytest.fixture
def f64():
    """Run the test body with 64-bit tensors."""
    with nc.float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criteria(request):
    """Collects (passed, detail) per acceptance criterion for the summary."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
