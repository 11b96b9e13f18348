import numpy as np
import pytest

from pointtrack.numerics import numerical_gradient, relative_error

GRAD_TOL = 1e-4
FD_STEP = 1e-5
N_INSTANCES = 20


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(loss, x, analytic, eps=FD_STEP, tol=GRAD_TOL):
    """Compare ``analytic`` against central differences of scalar ``loss`` at ``x``."""
    numeric = numerical_gradient(lambda _: loss(), x, eps)
    err = relative_error(analytic, numeric)
    assert err < tol, f"relative error {err:.2e}"
    return err


ACCEPTANCE: dict = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
