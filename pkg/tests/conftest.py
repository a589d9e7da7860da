import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    # replay the acceptance criterion lines after capture ends
    mod = sys.modules.get("test_acceptance")
    if mod is not None and getattr(mod, "RESULT_LINES", None):
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULT_LINES:
            terminalreporter.write_line(line)
