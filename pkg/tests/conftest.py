import numpy as np
import pandas as pd
import pytest

from packhealth.kernels import Hyperparameters


def write_rows(path, rows, header=None):
    header = header or ["timestamp", "current", *[f"u{i}" for i in range(1, 9)],
                        *[f"t{i}" for i in range(1, 5)], "soc"]
    pd.DataFrame(rows, columns=header).to_csv(path, index=False)
    return path


def make_row(ts, current=-50.0, volts=3.3, temp=25.0, soc=70.0):
    v = [volts] * 8 if np.isscalar(volts) else list(volts)
    return [ts, current, *v, temp, temp, temp, temp, soc]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hp():
    return Hyperparameters()


@pytest.fixture
def small_csv(tmp_path):
    rows = [make_row(1.6e9 + 10 * k) for k in range(3)]
    return write_rows(tmp_path / "small.csv", rows)


_ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line and fail the test when the check does not hold."""

    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {criterion}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    def skip(criterion: str, reason: str) -> None:
        _ACCEPTANCE.append(f"SKIP {criterion}: {reason}")
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
