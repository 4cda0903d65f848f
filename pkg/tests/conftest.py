import numpy as np
import pytest

from seqstop.example1 import Ex1Config
from seqstop.example2 import Ex2Config
from seqstop.forward_sim import run_forward


@pytest.fixture(scope="session")
def ex1_small():
    return Ex1Config(t_max=10)


@pytest.fixture(scope="session")
def ex1_ds_small(ex1_small):
    return run_forward(ex1_small, 2000, master_seed=11)


@pytest.fixture(scope="session")
def ex2_short():
    return Ex2Config(t_max=8)


@pytest.fixture(scope="session")
def ex2_ds_short(ex2_short):
    return run_forward(ex2_short, 300, master_seed=5)


@pytest.fixture(scope="session")
def ex1_dqn():
    """Default DQN on Example 1 defaults, seed 0 (shared by the slow tests and criterion 6)."""
    from seqstop.qlearn import DQNConfig, dqn_train
    return dqn_train(Ex1Config(), DQNConfig(), seed=0)


@pytest.fixture(scope="session")
def ex2_pg():
    """Default REINFORCE run on Example 2 defaults, seed 0 (shared by the slow tests and criterion 7)."""
    from seqstop.pg import PGConfig, train
    return train(Ex2Config(), PGConfig(), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion; lines are printed at the end of the run."""
    def record(label: str, ok: bool, detail: str):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
