import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    state = {}

    def record(number, text):
        state["number"], state["text"] = number, text

    yield record
    if "number" in state:
        call = getattr(request.node, "rep_call", None)
        passed = call is not None and call.passed
        line = f"criterion {state['number']:>2}: {'PASS' if passed else 'FAIL'}  {state['text']}"
        ACCEPTANCE_LINES[state["number"]] = line
        print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
