import numpy as np
import pytest
import torch

torch.set_num_threads(1)

CRITERIA: list = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def check(number, ok, detail, hard=True):
        status = "PASS" if ok else ("FAIL" if hard else "FAIL (recorded only)")
        line = f"criterion {number}: {status}: {detail}"
        CRITERIA.append(line)
        print(line)
        if hard:
            assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":").split(".")[0])):
            terminalreporter.write_line(line)
