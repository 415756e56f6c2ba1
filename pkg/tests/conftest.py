import acceptance_support


def pytest_terminal_summary(terminalreporter):
    if not acceptance_support.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_support.summary_lines():
        terminalreporter.write_line(line)
