import numpy as np
import pytest
import torch

from lfs_fewshot import numerics as nx

nx.configure_determinism()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
