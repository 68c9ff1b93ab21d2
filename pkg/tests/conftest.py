"""Shared pytest hooks: acceptance verdicts are collected and printed at the end of the run."""
import pytest

VERDICTS = []


class Verdict:
    def __init__(self, number, title):
        self.number, self.title, self.line = number, title, None

    def record(self, ok, detail):
        self.line = f"{'PASS' if ok else 'FAIL'} criterion {self.number} ({self.title}): {detail}"
        VERDICTS.append(self.line)
        print(self.line)
        assert ok, self.line


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    v = Verdict(*marker.args)
    yield v
    if v.line is None:
        VERDICTS.append(f"FAIL criterion {v.number} ({v.title}): did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion under test")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
