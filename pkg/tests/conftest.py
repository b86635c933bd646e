import sys
from pathlib import Path

import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# single-core sandbox: first-call torch overhead makes wall-clock deadlines flaky
settings.register_profile("default", deadline=None)
settings.load_profile("default")
torch.set_num_threads(1)


# ---------------------------------------------------------------- acceptance summary

_criteria: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    import re
    m = re.search(r"test_acceptance\.py::test_c(\d+)[a-z]?_", report.nodeid)
    if not m:
        return
    name = report.nodeid.split("::")[-1]
    runs = _criteria.setdefault(int(m.group(1)), {})
    outcome, secs = runs.get(name, ("passed", 0.0))
    # setup time (e.g. the shared smoke run) counts too; the first non-passing phase decides
    if outcome == "passed" and not report.passed:
        outcome = report.outcome
    runs[name] = (outcome, secs + report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        runs = _criteria[n]
        ok = all(o == "passed" for o, _ in runs.values())
        failed = [name for name, (o, _) in runs.items() if o != "passed"]
        secs = sum(d for _, d in runs.values())
        detail = f"  failing: {', '.join(failed)}" if failed else ""
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} "
                                    f"({len(runs)} check(s), {secs:.1f}s){detail}")
