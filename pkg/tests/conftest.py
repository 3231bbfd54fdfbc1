REPORT = []


def _order(line):
    tag = line.split()[2].rstrip(":")
    return (0, int(tag)) if tag.isdigit() else (1, tag)


def pytest_terminal_summary(terminalreporter):
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=_order):
            terminalreporter.write_line(line)
