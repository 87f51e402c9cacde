import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> {part: (passed, detail)}; filled by test_acceptance
ACCEPTANCE: dict[int, dict[str, tuple[bool, str]]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    def record(number: int, part: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.setdefault(number, {})[part] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in range(1, 12):
        parts = ACCEPTANCE.get(number)
        if not parts:
            tr.write_line(f"criterion {number:2d}: NOT RUN")
            continue
        verdict = "PASS" if all(ok for ok, _ in parts.values()) else "FAIL"
        detail = "; ".join(f"{p} {'ok' if ok else 'FAILED'} ({d})" if d else f"{p} {'ok' if ok else 'FAILED'}"
                           for p, (ok, d) in parts.items())
        tr.write_line(f"criterion {number:2d}: {verdict}  {detail}")
