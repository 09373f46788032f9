import pytest

_criteria: dict[int, str] = {}


class CriterionLog:
    def record(self, number: int, ok: bool, detail: str) -> None:
        _criteria[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(_criteria[number])


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
