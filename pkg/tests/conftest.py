import numpy as np
import pytest

from barmiss.harness import gen_ground_truth


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_truth():
    return gen_ground_truth(6, 8, seed=3)


def random_events(rng, M, T, rate=0.4):
    return (rng.random((M, T)) < rate).astype(np.uint8)


def random_ball_row(rng, M, radius=1.0):
    a = rng.uniform(-1, 1, M)
    return a * rng.uniform(0.1, radius) / np.abs(a).sum()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
