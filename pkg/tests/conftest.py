import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    def emit(number: int, ok: bool, detail: str, seconds: float, limit: float):
        within = seconds < limit
        status = "PASS" if ok and within else "FAIL"
        line = f"criterion {number:2d}: {status}  {detail}  [{seconds:.1f}s, limit {limit:.0f}s]"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok and within

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
