import pytest

ACCEPTANCE_LINES: dict = {}


class _Recorder:
    def __call__(self, criterion, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES[str(criterion)] = line
        print(line)
        return ok


@pytest.fixture
def acceptance():
    return _Recorder()


def _order(key: str):
    head = key.rstrip("abcdefghijklmnopqrstuvwxyz")
    return (int(head) if head.isdigit() else 99, key)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=_order):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
