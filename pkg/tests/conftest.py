import pytest

ACCEPTANCE: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.line = None

    def record(self, ok: bool, detail: str) -> bool:
        self.line = f"criterion {self.number} {self.title}: {'PASS' if ok else 'FAIL'} ({detail})"
        return ok


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    ACCEPTANCE[c.number] = c.line or f"criterion {c.number} {c.title}: FAIL (raised before reporting)"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
