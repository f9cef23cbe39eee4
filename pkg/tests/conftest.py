import pytest

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record a named acceptance criterion; assert afterwards."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        ACCEPTANCE.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
