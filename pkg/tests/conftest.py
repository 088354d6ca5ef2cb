import pytest

# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE_RESULTS: dict = {}


class CriterionRecorder:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.done = False

    def check(self, ok: bool, detail: str) -> None:
        self.done = True
        ACCEPTANCE_RESULTS[self.number] = (bool(ok), f"{self.title}: {detail}")
        print(f"{'PASS' if ok else 'FAIL'} criterion {self.number:2d} {self.title}: {detail}")
        assert ok, detail


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance criterion; an exception before ``check`` counts as FAIL."""
    marker = request.node.get_closest_marker("criterion")
    rec = CriterionRecorder(*marker.args)
    yield rec
    if not rec.done:
        ACCEPTANCE_RESULTS[rec.number] = (False, f"{rec.title}: did not complete")
        print(f"FAIL criterion {rec.number:2d} {rec.title}: did not complete")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {detail}")
