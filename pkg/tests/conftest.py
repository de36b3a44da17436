import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``criterion(num, ok, detail)`` records one acceptance verdict and fails the test if ``ok`` is false."""
    results = request.config.stash[_RESULTS]

    def record(num: int, ok: bool, detail: str) -> None:
        results[num] = (bool(ok), detail)
        assert ok, f"criterion {num}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, detail = results[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num:2d}: {detail}")
