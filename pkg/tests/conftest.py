import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the summary prints them whether or not output is captured."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[_RESULTS].append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = sorted(config.stash.get(_RESULTS, []))
    if results:
        terminalreporter.section("acceptance")
        for _, line in results:
            terminalreporter.write_line(line)
