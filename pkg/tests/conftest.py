import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(k, ok, detail)`` records one acceptance line and returns ``ok``."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(k: int, ok: bool, detail: str) -> bool:
        ok = bool(ok)
        lines[k] = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[k])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
