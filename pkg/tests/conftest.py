import contextlib

import pytest

_CRITERIA: dict[str, tuple[str, str, str]] = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion's PASS/FAIL line.

    The body asserts; ``outcome.detail`` holds the measured numbers.
    """

    @contextlib.contextmanager
    def record(key, title):
        outcome = _Outcome()
        try:
            yield outcome
        except BaseException as err:
            msg = outcome.detail or f"{type(err).__name__}: {err}".splitlines()[0]
            _CRITERIA[key] = ("FAIL", title, msg)
            raise
        _CRITERIA[key] = ("PASS", title, outcome.detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: (int("".join(c for c in k if c.isdigit()) or 0), k)):
        status, title, detail = _CRITERIA[key]
        terminalreporter.write_line(f"[{status}] {key}. {title}: {detail}")
