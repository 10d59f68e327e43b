import contextlib
import time

import pytest

_RESULTS = {}


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion."""

    @contextlib.contextmanager
    def check(self, number, title, budget=None):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            _RESULTS[number] = (False, title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        elapsed = time.perf_counter() - start
        if budget is not None and elapsed > budget:
            _RESULTS[number] = (False, title, f"took {elapsed:.1f}s, budget {budget:.0f}s")
            pytest.fail(f"criterion {number} over its time budget: {elapsed:.1f}s > {budget}s")
        _RESULTS[number] = (True, title, f"{elapsed:.1f}s")


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        ok, title, detail = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
