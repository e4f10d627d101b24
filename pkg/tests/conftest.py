import logging

import numpy as np
import pytest

from ekfvio.geometry import quat_normalize


def central_diff(f, x, h=1e-6):
    """Central finite-difference Jacobian of ``f`` at ``x`` (columns = inputs)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        J[:, i] = (np.asarray(f(x + e)).ravel() - np.asarray(f(x - e)).ravel()) / (2 * h)
    return J


def rel_err(A, B):
    """Max abs difference relative to the larger of the two norms (1 floor for tiny matrices)."""
    A, B = np.asarray(A), np.asarray(B)
    scale = max(np.abs(A).max(initial=0.0), np.abs(B).max(initial=0.0), 1.0)
    return float(np.abs(A - B).max(initial=0.0) / scale)


def random_quat(rng):
    return quat_normalize(rng.standard_normal(4))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("ekfvio").setLevel(logging.ERROR)
    yield


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
