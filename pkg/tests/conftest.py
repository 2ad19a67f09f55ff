import pytest

from condldp.models import make_bernoulli_cramer, make_gaussian_cramer, make_gaussian_pair

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def gauss():
    return make_gaussian_cramer(0.0, 1.0)


@pytest.fixture(scope="session")
def bern():
    return make_bernoulli_cramer(0.3)


@pytest.fixture(scope="session")
def pair():
    return make_gaussian_pair()


@pytest.fixture
def acceptance_line():
    def record(number, passed, detail):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
