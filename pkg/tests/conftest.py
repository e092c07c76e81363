"""Shared pytest plumbing: per-criterion summary lines for the acceptance
suite."""

_CRITERIA_RESULTS = {}

_DESCRIPTIONS = {
    1: "gradient correctness vs central finite differences",
    2: "border-occupancy matches brute-force enumeration",
    3: "stage rewards exactly match the {1, 0.5, 0} branches",
    4: "hierarchical selector: goal-masked argmax == restricted argmax",
    5: "Double DQN prices the online argmax with the target net",
    6: "prioritized replay sampling frequencies within 3 sigma",
    7: "rotation pipeline exactness and batch/sequential equality",
    8: "two identical stage-1 runs are byte-identical",
    9: "stage-1 training reaches 80% trailing grasp success (3 seeds)",
    10: "two-stage policy solves adversarial clutter with pushes",
    11: "benchmark metrics reproduce hand counts",
    12: "checkpoint round trip and resume equivalence",
}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    name = report.nodeid.split("::")[-1]
    if name.startswith("test_criterion_"):
        try:
            num = int(name.split("_")[2])
        except (IndexError, ValueError):
            return
        _CRITERIA_RESULTS[num] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA_RESULTS):
        outcome = _CRITERIA_RESULTS[num]
        mark = "PASS" if outcome == "passed" else outcome.upper()
        desc = _DESCRIPTIONS.get(num, "")
        terminalreporter.write_line(f"criterion {num:2d}: {mark} - {desc}")
