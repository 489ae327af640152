import numpy as np
import pytest

from mmfusion.engine import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stream():
    return RngStream(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training/ablation tests")


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance checklist even when capture swallows prints."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULT_LINES", []) if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
