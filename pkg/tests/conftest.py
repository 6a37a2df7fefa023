"""Shared pytest hooks: one pass/fail line per acceptance criterion at the end of the run."""

CRITERIA = {
    1: "gradient correctness (finite differences, < 1e-4, 100 seeds, < 2 min)",
    2: "DSP oracles (naive DFT 1e-8, exact filterbank, frame count, mel(1000))",
    3: "Bayes decision-rule equivalence (1000 tables, 100%, < 5 s)",
    4: "attention invariants (row sums, masked zeros, padding, brute force)",
    5: "split-protocol invariants (26 folds, 200/100 words, 8/7 severity)",
    6: "synthetic fusion gate (3 seeds x 2 tasks x 2 modalities, < 10 min each)",
    7: "training control (lr cut at epoch 6, stop at 9, best-epoch restore)",
    8: "determinism (bitwise caches, checkpoints, reports)",
}

_item_criterion: dict[str, int] = {}
_outcomes: dict[int, dict[str, bool]] = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _item_criterion[item.nodeid] = int(mark.args[0])


def pytest_runtest_logreport(report):
    n = _item_criterion.get(report.nodeid)
    if n is None:
        return
    tests = _outcomes.setdefault(n, {})
    ok = tests.get(report.nodeid, True)
    if report.failed or (report.when == "call" and report.skipped):
        ok = False
    tests[report.nodeid] = ok


def pytest_terminal_summary(terminalreporter):
    if not _item_criterion:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in CRITERIA.items():
        tests = _outcomes.get(n)
        if not tests:
            tr.write_line(f"criterion {n}: NOT RUN  - {title}")
            continue
        passed = sum(tests.values())
        status = "PASS" if passed == len(tests) else "FAIL"
        tr.write_line(f"criterion {n}: {status}  ({passed}/{len(tests)} tests) - {title}")
