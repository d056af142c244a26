import pytest

_ACCEPTANCE = {}


@pytest.fixture
def record():
    """Record an acceptance-criterion outcome for the end-of-run summary."""
    def _record(number: int, passed: bool, detail: str):
        _ACCEPTANCE[number] = (bool(passed), detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
