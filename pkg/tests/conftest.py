import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one acceptance verdict: ``acceptance(number, passed, detail)``."""

    def record(number, passed, detail=""):
        _ACCEPTANCE[number] = (bool(passed), detail)
        line = f"ACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
