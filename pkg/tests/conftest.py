import pytest

# criterion number -> (verdict, detail), filled in by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[str, str]] = {}


@pytest.fixture
def record_criterion():
    def record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = ("PASS" if ok else "FAIL", detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split("-")[0]), k)):
        verdict, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {verdict}  {detail}")
