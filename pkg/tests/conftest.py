import pytest
from hypothesis import settings

from kimmel.model import binomial_split, from_table, linear_fractional_independent
from kimmel.pmf import Pmf

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

LAW_A = from_table([(1, 0, 0.5), (0, 1, 0.5)])
LAW_B = from_table([(2, 2, 1.0)])
LAW_C = linear_fractional_independent(0.3, 0.3)
LAW_D = from_table([(0, 0, 0.5), (1, 0, 0.25), (0, 1, 0.25)])
LAW_E = binomial_split(Pmf.from_dict({0: 0.6, 1: 0.2, 2: 0.2}), 0.5)
LAW_D5 = from_table([(2, 2, 0.8), (0, 0, 0.2)])
LAW_D2 = binomial_split(Pmf.from_dict({0: 0.25, 1: 0.5, 2: 0.25}), 0.5)
# m0 = 0.5, m1 = 1.9: both means from E(Z) = 2.4 and p = 0.5 / 2.4
LAW_D4 = binomial_split(Pmf.from_dict({0: 0.4, 4: 0.6}), 5 / 24)

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def laws():
    return {"A": LAW_A, "B": LAW_B, "C": LAW_C, "D": LAW_D, "E": LAW_E,
            "D5": LAW_D5, "D2": LAW_D2, "D4": LAW_D4}
