import numpy as np
import pytest

from robustcp.models import MlpConfig, MlpParams


def linear_params(W, b) -> MlpParams:
    W = np.asarray(W, dtype=np.float64)
    return MlpParams(MlpConfig(W.shape[1], (), W.shape[0]), (W,), (np.asarray(b, dtype=np.float64),))


@pytest.fixture
def fixture_model() -> MlpParams:
    """4-class linear model of one input with f(2) = [3, 5, 3, 0.6]; class 0 is the true class."""
    return linear_params([[-1.0], [1.0], [0.5], [-0.2]], [5.0, 3.0, 2.0, 1.0])


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
