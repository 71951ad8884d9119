import math

import numpy as np
import pytest

from branchcrt.config import reference_config
from branchcrt.spectral import Domain

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def ref():
    return reference_config()


@pytest.fixture(scope="session")
def interval():
    return Domain.interval(0.0, math.pi)


@pytest.fixture(scope="session")
def params(ref):
    return ref.params()


@pytest.fixture(scope="session")
def x0(ref):
    return ref.x


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def rng(seed=0):
    return np.random.default_rng(seed)
