import numpy as np
import pytest

from linq import DiscountedMdp, FeatureMap, LinearMdp, make_random_linear_mdp

# rows ordered (0,stay), (0,go), (1,stay), (1,go)
TWO_STATE_P = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
TWO_STATE_R = np.array([[0.0, 0.0], [1.0, 1.0]])


def two_state(gamma=0.5):
    return DiscountedMdp(TWO_STATE_R, TWO_STATE_P, gamma)


def two_state_linear(gamma=0.5):
    """TwoState with one-hot features per pair (``psi`` is the kernel itself)."""
    return LinearMdp.from_factors(TWO_STATE_R, FeatureMap(np.eye(4)), TWO_STATE_P, gamma)


@pytest.fixture
def two_state_mdp():
    return two_state()


@pytest.fixture
def two_state_lm():
    return two_state_linear()


@pytest.fixture(scope="session")
def small_instance():
    return make_random_linear_mdp(20, 3, 4, 0.9, seed=1)


@pytest.fixture(scope="session")
def standard_instance():
    return make_random_linear_mdp(200, 5, 10, 0.9, seed=0)


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
