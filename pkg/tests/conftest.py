import time
from contextlib import contextmanager

import pytest

_RESULTS = []


class _Criterion:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion; usage: ``with criterion(3, "name") as c: ...``."""

    @contextmanager
    def run(number, name, budget_s=None):
        c = _Criterion()
        t0 = time.perf_counter()
        ok = False
        try:
            yield c
            elapsed = time.perf_counter() - t0
            c.detail += f" [{elapsed:.1f}s]"
            if budget_s is not None:
                assert elapsed < budget_s, f"runtime {elapsed:.1f}s exceeds {budget_s}s"
            ok = True
        finally:
            status = "PASS" if ok else "FAIL"
            _RESULTS.append(f"criterion {number} {status}: {name}{c.detail}")

    return run


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
