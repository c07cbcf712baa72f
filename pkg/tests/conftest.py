import numpy as np
import pytest

from postilt.optics import ProcessCorners, Corner, make_corners, make_synthetic_kernels


def fd_grad(f, x, eps=1e-6):
    """Central differences of scalar f() w.r.t. every entry of x (mutated in place, restored)."""
    g = np.zeros_like(x, dtype=float)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        a = f()
        x[idx] = orig - eps
        b = f()
        x[idx] = orig
        g[idx] = (a - b) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def corners():
    return make_corners()


@pytest.fixture(scope="session")
def tiny_corners():
    """k=3 kernels on a 9 px footprint for fast gradient work."""
    focus = make_synthetic_kernels(9, 3, 0.12)
    blur = make_synthetic_kernels(9, 3, 0.12, 0.6)
    return ProcessCorners(Corner(focus, 1.0), Corner(blur, 0.98), Corner(focus, 1.02))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
