import pytest

# criterion id -> [(passed, detail), ...], filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, list[tuple[bool, str]]] = {}


@pytest.fixture
def record():
    def put(cid: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.setdefault(cid, []).append((bool(passed), detail))
        return passed
    return put


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[cid]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
