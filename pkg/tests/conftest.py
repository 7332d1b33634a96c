import random
import warnings

import pytest

from fedselect import paillier
from fedselect.distributions import generate_federation
from fedselect.selection import ClampWarning


@pytest.fixture(scope="session")
def tiny_key():
    return paillier.keypair_from_primes(11, 13)


@pytest.fixture(scope="session")
def key64():
    return paillier.keygen(64, random.Random(42), insecure=True)


@pytest.fixture(scope="session")
def skewed():
    """N=1000, C=10, rho=10, EMD 1.5."""
    return generate_federation(C=10, N=1000, n_vc=128, rho=10, emd=1.5, seed=0)


@pytest.fixture(scope="session")
def small_ds():
    return generate_federation(C=10, N=60, n_vc=64, rho=5, emd=1.0, seed=3)


@pytest.fixture
def no_clamp_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    from _report import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, title, detail = RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} | {detail}")
