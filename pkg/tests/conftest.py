import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line; assert afterwards so failures still print."""

    def record(label, ok, detail=""):
        ACCEPTANCE.append((label, bool(ok), detail))
        assert ok, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}  {detail}")
