import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Call with (criterion, ok, detail); the verdicts are printed at the end of the run."""
    def record(criterion: str, ok: bool, detail: str = "") -> bool:
        prev = _ACCEPTANCE.get(criterion)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}" if detail else prev[1]
        _ACCEPTANCE[criterion] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {name}: {detail}")
