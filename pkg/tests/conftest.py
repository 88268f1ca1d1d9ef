import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def checksum(t):
    t = t.detach().double()
    return t.sum().item(), t.abs().sum().item()


ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    line = 'criterion {} {}: {} ({})'.format(number, 'PASS' if passed else 'FAIL', title, detail)
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section('acceptance criteria')
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
