import pytest

from adafuse import FusionConfig

ACCEPTANCE_LINES = []


@pytest.fixture
def tiny_config():
    return FusionConfig(d=6, d_proj=5, d_mid=4, d_hidden=3, n_experts=3, d_router=2)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
