import time
from contextlib import contextmanager

import pytest

_RESULTS = {}


class _Record:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, budget_s) as rec:`` records PASS when the block
    finishes without error inside its time budget, FAIL otherwise."""

    @contextmanager
    def run(number, budget_s):
        rec = _Record()
        start = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            why = rec.detail if str(exc).startswith(rec.detail) and rec.detail else \
                f"{rec.detail} {type(exc).__name__}: {exc}".strip()
            _RESULTS[number] = ("FAIL", why)
            raise
        elapsed = time.perf_counter() - start
        ok = elapsed < budget_s
        _RESULTS[number] = ("PASS" if ok else "FAIL", f"{rec.detail} ({elapsed:.1f} s, budget {budget_s:g} s)".strip())
        assert ok, f"criterion {number} took {elapsed:.1f} s, budget {budget_s:g} s"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail.splitlines()[0] if detail else ''}")
