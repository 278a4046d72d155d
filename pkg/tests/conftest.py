# Acceptance verdicts collected during the run, echoed once at the end.
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section('acceptance criteria')
        for line in VERDICTS:
            terminalreporter.write_line(line)
