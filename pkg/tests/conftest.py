import pytest

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one "PASS/FAIL name: detail" line per acceptance criterion."""

    def record(name, ok, detail=""):
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
