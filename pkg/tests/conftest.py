import pytest

_LINES = []


@pytest.fixture
def verdict():
    """Record one acceptance line; returns the ``ok`` flag for asserting."""
    def record(criterion, name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {name}" + (f" ({detail})" if detail else "")
        _LINES.append((criterion, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance summary")
    for _, line in sorted(_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
