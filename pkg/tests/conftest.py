import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criteria():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
