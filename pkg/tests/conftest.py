import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, TITLES, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(TITLES):
        terminalreporter.write_line(line(n))
