import numpy as np
import pytest

from varldp.coeffs import CoefficientPair
from varldp.triple import SpectralTriple

_ACCEPTANCE = []


def record(number, title, passed, detail=""):
    """Remember one acceptance verdict for the terminal summary."""
    _ACCEPTANCE.append((number, title, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}  {title}  ({detail})")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dirichlet_heat(m=32, length=1.0, nu=1.0):
    """Plain linear heat equation ``u' = nu u_xx`` with one idle noise direction."""
    triple = SpectralTriple.dirichlet1d(m, length)
    lam = nu * triple.eigenvalues
    pair = CoefficientPair(dim=m, noise_dim=1, A0=lambda t, u: lam, theta=nu, name="heat")
    return pair, triple


def smooth_dirichlet_data(m):
    """Sine coefficients of ``x (1 - x)`` on (0, 1)."""
    k = np.arange(1, m + 1)
    return np.sqrt(2) * np.where(k % 2 == 1, 4.0 / (np.pi * k) ** 3, 0.0)
