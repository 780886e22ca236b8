"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

_results: dict[int, list[tuple[bool, str]]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.failed and report.when == "setup"):
        _results.setdefault(props["criterion"], []).append((report.passed, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        runs = _results[n]
        ok = all(passed for passed, _ in runs)
        detail = "; ".join(d for _, d in runs if d)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
