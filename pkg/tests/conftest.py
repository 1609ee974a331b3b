import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_VERDICTS: list[tuple[int, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance criterion's outcome, print it, and fail the test when it did not hold."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
