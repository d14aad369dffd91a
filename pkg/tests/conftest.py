import sys
from pathlib import Path

# Tests import shared helpers (gradcheck, acceptance reporting) directly.
sys.path.insert(0, str(Path(__file__).parent))

_CRITERION_LINES: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.write_line(line)
