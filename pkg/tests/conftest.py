import pytest

# criterion number -> (verdict, detail), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:>2}: {verdict}  {detail}")


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(num: int, ok: bool, detail: str):
        verdict = "PASS" if ok else "FAIL"
        ACCEPTANCE[num] = (verdict, detail)
        print(f"criterion {num}: {verdict}  {detail}")
        assert ok, f"criterion {num} failed: {detail}"

    return report
