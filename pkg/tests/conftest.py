import numpy as np
import pytest

from cadalign.evaluation import build_store
from cadalign.synth import SceneSpec, generate_scene


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def library_store():
    return build_store()


@pytest.fixture(scope="session")
def small_scene():
    """One default synthetic scene, shared across test modules."""
    return generate_scene(SceneSpec(seed=7, n_frames=16))


def rodrigues(axis, deg):
    """Rotation matrix from axis-angle by the explicit Rodrigues formula."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    a = np.radians(deg)
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K


ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
