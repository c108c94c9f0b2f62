import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion label ("1", "5a", ...) -> (passed, detail), filled in by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
        passed, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label:>3}: {'PASS' if passed else 'FAIL'}  {detail}")
