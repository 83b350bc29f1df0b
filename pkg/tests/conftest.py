from __future__ import annotations

import numpy as np
import pytest

from cbrl.cmdp import TabularCmdp
from cbrl.envs.synthetic import synthetic_cmdp


def one_state(reward, gamma=0.5, lam=1.0) -> TabularCmdp:
    r = np.atleast_2d(np.asarray(reward, dtype=float))
    A = r.shape[1]
    return TabularCmdp(r, np.ones((1, A, 1)), np.ones(1), gamma, lam, np.zeros((1, A, 0)))


@pytest.fixture
def family():
    return synthetic_cmdp(3, 2, 2, seed=0)


@pytest.fixture
def cmdp3(family):
    return family.cmdp(np.array([0.5, -0.5]), family.contexts[0])


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
