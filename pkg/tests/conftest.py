import re
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    outcome = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = CRITERION.search(getattr(rep, "nodeid", ""))
            if m:
                n = int(m.group(1))
                ok = key == "passed" and outcome.get(n, True)
                outcome[n] = ok
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcome):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if outcome[n] else 'FAIL'}")
