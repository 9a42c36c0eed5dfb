import time

import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.stash["call_passed"] = rep.passed


class Criterion:
    """Collects named checks for one acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.checks = {}
        self.start = time.perf_counter()

    def check(self, name, ok, value=None):
        self.checks[name] = (bool(ok), value)
        return bool(ok)

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def line(self, passed):
        parts = [f"{k}={v:.4g}" if isinstance(v, float) else k if v is None else f"{k}={v}"
                 for k, (_, v) in self.checks.items()]
        failed = [k for k, (ok, _) in self.checks.items() if not ok]
        tail = f"; failed: {', '.join(failed)}" if failed else ""
        verdict = "PASS" if passed else "FAIL"
        return f"criterion {self.number:>2} {verdict}  {self.title} ({'; '.join(parts)}{tail})"


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    passed = request.node.stash.get("call_passed", False) and all(ok for ok, _ in c.checks.values())
    line = c.line(passed)
    print(line)
    request.config.stash[_LINES_KEY].append(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
