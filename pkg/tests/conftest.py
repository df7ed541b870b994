import pytest

AC_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store the outcome of an acceptance criterion for the end-of-run summary."""
    def _record(number: int, ok: bool, detail: str) -> bool:
        AC_RESULTS[number] = (bool(ok), detail)
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not AC_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(AC_RESULTS):
        ok, detail = AC_RESULTS[k]
        terminalreporter.write_line(f"AC{k} {'PASS' if ok else 'FAIL'} {detail}")
