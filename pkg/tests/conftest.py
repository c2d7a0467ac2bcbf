import numpy as np
import pytest

from raysplat.geometry import Camera, look_at


def rand_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def simple_camera(f=100.0, c=50.0, size=101, R=None, t=(0, 0, 0), id="0"):
    K = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    return Camera(K, np.eye(3) if R is None else R, np.asarray(t, dtype=float), size, size, id=id)


def random_camera(rng, id="0", size=64):
    f = rng.uniform(40, 120)
    K = np.array([[f, 0, rng.uniform(20, 44)], [0, f * rng.uniform(0.9, 1.1), rng.uniform(20, 44)], [0, 0, 1.0]])
    return Camera(K, rand_rotation(rng), rng.normal(size=3), size, size, id=id)


def facing_camera(center, target=(0, 0, 0), size=32, f=30.0, id="0"):
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1.0]])
    return Camera(K, look_at(center, target), np.asarray(center, dtype=float), size, size, id=id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; shown at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
