import pytest

ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(key, passed, detail):
        ACCEPTANCE[key] = (passed, detail)
        print(f"{'PASS' if passed else 'FAIL'} {key}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0][1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {key}: {detail}")
