import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion(request):
    """Call with (number, description); the outcome line is printed in the terminal summary."""
    state = {}

    def register(number, text):
        state["label"] = f"criterion {number:>2}: {text}"

    yield register
    if "label" in state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {state['label']}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
