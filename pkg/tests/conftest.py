import numpy as np
import pytest

from pcdarts.tensor import clear_tape, set_default_dtype


@pytest.fixture(autouse=True)
def float64_default():
    set_default_dtype("float64")
    clear_tape()
    yield
    clear_tape()
    set_default_dtype("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    rows = acceptance_report.lines()
    if rows:
        terminalreporter.section("acceptance criteria")
        for row in rows:
            terminalreporter.write_line(row)
