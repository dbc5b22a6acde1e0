import pytest

# criterion number -> (label, passed, detail); filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def record(n: int, label: str, passed: bool, detail: str = ""):
    ACCEPTANCE[n] = (label, bool(passed), detail)
    print(f"criterion {n:>2} {'PASS' if passed else 'FAIL'}: {label}  {detail}")


@pytest.fixture
def accept():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        label, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {label}  {detail}")
