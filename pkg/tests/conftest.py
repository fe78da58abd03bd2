import numpy as np
import pytest

from lumisplit.proxymm import PoseCamera, generate_model


@pytest.fixture(scope="session")
def model():
    return generate_model(7)


@pytest.fixture(scope="session")
def small_model():
    return generate_model(7, texture_size=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def frontal_pose(size=128, z=5.5):
    return PoseCamera(np.zeros(3), np.array([0.0, 0.0, z]), focal=2.0 * size, image_size=(size, size))


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL verdict for the acceptance summary."""
    def record(criterion, ok, detail):
        ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
