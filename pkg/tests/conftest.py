import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from sepcross.geometry import from_action_angle  # noqa: E402
from sepcross.model import make_preset  # noqa: E402

# Acceptance lines collected by tests/test_acceptance.py and printed at the end.
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def dw_slow():
    return make_preset("dw-slow")


@pytest.fixture(scope="session")
def dw_slow_fric():
    return make_preset("dw-slow", gamma=0.2)


@pytest.fixture(scope="session")
def dw_asym():
    return make_preset("dw-asym")


@pytest.fixture(scope="session")
def dw_dissip():
    return make_preset("dw-dissip")


def base_point(system, I0=0.6, phi0=math.pi, z0=1.0):
    z = z0 if system.dim_z else None
    pq = from_action_angle(system, 3, I0, phi0, z)
    return tuple(np.concatenate([pq, [z0] if system.dim_z else []]))
