import numpy as np
import pytest

from csiloc.core import ArrayGeometry, CsiSample, Dataset


def random_dataset(rng, n=10, M=4, K=3, pos_dim=2, scenario_max=3):
    geom = ArrayGeometry(num_antennas=M, num_subcarriers=K)
    samples = []
    for _ in range(n):
        h = (rng.normal(size=(M, K)) + 1j * rng.normal(size=(M, K))).astype(np.complex64)
        pos = rng.uniform(0, 6, size=pos_dim).astype(np.float32).astype(np.float64)
        samples.append(CsiSample(h, pos, int(rng.integers(0, scenario_max + 1))))
    return Dataset(geom, tuple(samples))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset(rng):
    return random_dataset(rng, n=100, M=8, K=5)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
