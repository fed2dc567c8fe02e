from typing import NamedTuple

import numpy as np
import pytest


class Samples(NamedTuple):
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray


def linear_samples(A, B, m, rng, scale=1.0):
    """Noise-free samples of ``x+ = A x + B u``."""
    X = rng.uniform(-scale, scale, size=(m, A.shape[0]))
    U = rng.uniform(-scale, scale, size=(m, B.shape[1]))
    return Samples(X, U, X @ A.T + U @ B.T)


def random_stable(rng, n, radius=0.9):
    A = rng.normal(size=(n, n))
    return radius * A / max(1e-12, np.max(np.abs(np.linalg.eigvals(A))))


def central_diff(fn, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abcd"))):
        terminalreporter.write_line(line)
