import os

import pytest

_ACCEPTANCE: dict[int, str] = {}


def _line(number: int, status: str, title: str, detail: str) -> str:
    return f"criterion {number} {status}: {title} ({detail})"


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = _line(number, "PASS" if ok else "FAIL", title, detail)
        _ACCEPTANCE[number] = line
        print(line)
        assert ok, line

    return record


@pytest.fixture
def require_slow(request):
    """Skip slow tests unless LUMEN_SLOW=1, leaving a SKIP line for acceptance criteria."""

    def check(number: int, title: str) -> None:
        if os.environ.get("LUMEN_SLOW") != "1":
            _ACCEPTANCE[number] = _line(number, "SKIP", title, "set LUMEN_SLOW=1 to run")
            pytest.skip("slow; set LUMEN_SLOW=1 to run")

    return check


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
