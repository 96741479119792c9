import numpy as np
import pytest

from sirpdoa.noise_model import build_speckle_covariance
from sirpdoa.numerics import normalize_trace
from sirpdoa.signal_model import ArrayGeometry

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str):
    ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        title, passed, detail = ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title} | {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ula6():
    return ArrayGeometry.ula(6)


@pytest.fixture(scope="session")
def speckle6():
    return normalize_trace(build_speckle_covariance(6))


def random_hpd(rng, n, jitter=1.0):
    B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return B @ B.conj().T + jitter * np.eye(n)
