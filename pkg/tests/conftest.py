import numpy as np
import pytest

from apdo.envs import TabularEnv, make_risky_chain


@pytest.fixture
def chain():
    return make_risky_chain(0.9, 2.0)


@pytest.fixture
def chain_env(chain):
    return TabularEnv(chain)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(f, x, eps=1e-5):
    """Numerical gradient of scalar f w.r.t. array x, perturbed in place and restored."""
    flat = x.reshape(-1)
    assert np.shares_memory(flat, x)
    g = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return g.reshape(x.shape)


def relative_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


ACCEPTANCE: dict[int, str] = {}


def report(number: int, ok: bool, detail: str) -> bool:
    """Record one acceptance line; the session prints them in criterion order."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
