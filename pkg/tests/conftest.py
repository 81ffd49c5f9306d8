from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording a PASS/FAIL line for an acceptance criterion."""
    results = request.config.stash[_RESULTS]

    @contextmanager
    def record(number: int, title: str):
        try:
            yield
        except BaseException as exc:
            results[number] = ("FAIL", title, f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        results[number] = ("PASS", title, "")

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        line = f"{status} criterion {number:2d}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
