import re
import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

_CRITERIA: dict[int, list[tuple[bool, str]]] = {}


def pytest_runtest_logreport(report):
    match = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    number = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _CRITERIA.setdefault(number, []).append((report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        status = "PASS" if all(ok for ok, _ in results) else "FAIL"
        detail = "; ".join(d for _, d in results if d)
        terminalreporter.write_line(f"criterion {number:2d}: {status}" + (f"  ({detail})" if detail else ""))
