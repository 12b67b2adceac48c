from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

GOLDEN = Path(__file__).parent / "golden"

# Filled by test_acceptance.py, printed after the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def golden_dir():
    return GOLDEN


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
