import re

import pytest

# criterion number -> summary lines, filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    match = re.match(r"test_c(\d+)_", item.name)
    if match and report.when == "call" and report.failed:
        number = int(match.group(1))
        if number not in ACCEPTANCE:
            message = call.excinfo.exconly().splitlines()[0] if call.excinfo else "failed"
            ACCEPTANCE[number] = [f"criterion {number:>2} FAIL  raised {message}"]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            for line in ACCEPTANCE[number]:
                terminalreporter.write_line(line)
