import contextlib
import os
import sys
import time

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

_VERDICTS = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.notes = []

    def note(self, text):
        self.notes.append(text)


@pytest.fixture
def criterion(request, capsys):
    """``with criterion(n, title) as c:`` records one PASS/FAIL line for acceptance item n."""

    @contextlib.contextmanager
    def run(number, title):
        c = _Criterion(number, title)
        t0 = time.perf_counter()
        verdict = "FAIL"
        try:
            yield c
            verdict = "PASS"
        except BaseException as exc:
            c.note(f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            raise
        finally:
            elapsed = time.perf_counter() - t0
            detail = "; ".join(c.notes)
            line = f"criterion {number} {verdict}  {title} [{elapsed:.2f}s]" + (f"  {detail}" if detail else "")
            request.config.stash.setdefault(_VERDICTS, {})[number] = line
            with capsys.disabled():
                print(f"\n{line}")

    return run


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
