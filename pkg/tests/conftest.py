import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pmean_portfolio.mdp import FiniteMDP  # noqa: E402


def one_hot_transition(next_state):
    """Deterministic dynamics from an (S, A) table of successor indices."""
    nxt = np.asarray(next_state)
    S, A = nxt.shape
    T = np.zeros((S, A, S))
    T[np.arange(S)[:, None], np.arange(A)[None, :], nxt] = 1.0
    return T


@pytest.fixture
def two_path_mdp():
    """Two equally likely trajectories with returns (1, 3) and (3, 1)."""
    T = np.zeros((3, 1, 3))
    T[0, 0, 1] = T[0, 0, 2] = 0.5
    T[1, 0, 1] = T[2, 0, 2] = 1.0
    R = np.zeros((2, 3, 1))
    R[:, 0, 0] = [0.5, 0.5]
    R[:, 1, 0] = [0.5, 2.5]
    R[:, 2, 0] = [2.5, 0.5]
    return FiniteMDP(T, R, horizon=2, initial_state=0, reward_lower=0.5, reward_upper=2.5)


@pytest.fixture
def coin_mdp():
    """Two states; every action moves to either state with probability 1/2."""
    T = np.full((2, 2, 2), 0.5)
    R = np.ones((1, 2, 2))
    return FiniteMDP(T, R, horizon=3, initial_state=0, reward_lower=1.0, reward_upper=1.0)


def pytest_terminal_summary(terminalreporter):
    log = sys.modules.get("acceptance_log")
    if log is None or not log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(log.RESULTS, key=lambda k: (int(k.split("(")[0]), k)):
        ok, detail = log.RESULTS[key]
        terminalreporter.write_line(log.format_line(key, ok, detail))
