import pytest

# (criterion id, passed, detail) in the order the acceptance checks ran
ACCEPTANCE = []


@pytest.fixture
def record():
    def _record(cid, passed, detail):
        ACCEPTANCE.append((cid, bool(passed), detail))
        return bool(passed)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid, passed, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{cid:<4} {'PASS' if passed else 'FAIL'}  {detail}")
