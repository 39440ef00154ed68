import numpy as np
import pytest
from hypothesis import settings

from fmrlasso import Dataset, MixtureParams

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_dataset(rng, n, p, k=2, sigma=0.5, scale=2.0):
    """Well-separated mixture data with a few active covariates."""
    x = rng.standard_normal((n, p))
    beta = np.zeros((k, p))
    n_act = min(p, 3)
    for r in range(k):
        beta[r, :n_act] = scale * (1.0 if r % 2 == 0 else -1.0) * (1 + r)
    labels = rng.integers(0, k, size=n)
    y = np.einsum("ij,ij->i", x, beta[labels]) + sigma * rng.standard_normal(n)
    return Dataset(x, y)


def random_theta(rng, k, p):
    pi = rng.dirichlet(np.ones(k)) * 0.9 + 0.1 / k
    pi = pi / pi.sum()
    return MixtureParams(rng.normal(size=(k, p)), rng.uniform(0.2, 5.0, size=k), pi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def report(number, ok, detail=""):
    """Record one acceptance line; printed now and again in the session summary."""
    line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
