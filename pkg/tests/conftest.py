import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "at3d", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("at3d")


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: ``criterion(n, ok, detail)`` prints
    a PASS/FAIL line, keeps it for the terminal summary and asserts."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
