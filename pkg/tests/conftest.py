import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance_record():
    def record(name: str, passed: bool, detail: str):
        ACCEPTANCE_LINES[name] = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(ACCEPTANCE_LINES[name])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES.values():
            terminalreporter.write_line(line)
