import pytest

from gridscreen.case_io import bundled_case
from gridscreen.powerflow import linearize_at_solution, solve_ac_powerflow

# One line per acceptance criterion, printed after the test run so the
# verdicts stay visible under output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def case14():
    return bundled_case("case14")


@pytest.fixture(scope="session")
def case118():
    return bundled_case("case118")


@pytest.fixture(scope="session")
def sol14(case14):
    return solve_ac_powerflow(case14)


@pytest.fixture(scope="session")
def sol118(case118):
    return solve_ac_powerflow(case118)


@pytest.fixture(scope="session")
def lin14(sol14):
    return linearize_at_solution(sol14, mode="full")


@pytest.fixture(scope="session")
def lin14_network(sol14):
    return linearize_at_solution(sol14, mode="network")


@pytest.fixture(scope="session")
def lin118(sol118):
    return linearize_at_solution(sol118, mode="full")
