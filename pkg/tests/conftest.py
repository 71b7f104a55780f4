import pytest

from nfsgate.harness import desk_benchmark

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def desk_data():
    """The desk-scale planted benchmark: M=20, vocab 100, 50k rows, |S*|=6, scale 2.0."""
    return desk_benchmark()


@pytest.fixture(scope="session")
def planted_data(desk_data):
    return desk_data, desk_data.planted.informative_fields


@pytest.fixture
def acceptance():
    """Record one pass/fail line; the caller still asserts."""
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(
            f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
