import pytest

from deltamix.simulation import run_study

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}

_STUDIES = {}


def study(case: str, n: int, runs: int = 20, seed: int = 0):
    """Monte-Carlo study shared by every test that asks for the same cell."""
    key = (case, n, runs, seed)
    if key not in _STUDIES:
        _STUDIES[key] = run_study(case, n, runs, seed=seed)
    return _STUDIES[key]


@pytest.fixture(scope="session")
def get_study():
    return study


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
