"""Collects one verdict line per acceptance criterion and prints them at the end."""
import pytest

_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict(request):
    """Call ``verdict(ok, detail)`` once per criterion test."""

    def record(ok: bool, detail: str) -> bool:
        key = request.node.name
        line = f"{'PASS' if ok else 'FAIL'}  {key}: {detail}"
        _VERDICTS[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k.split("_")[1][1:]) if k.startswith("test_c") else 99):
        terminalreporter.write_line(_VERDICTS[key])
