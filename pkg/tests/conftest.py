import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit, name, ok, detail in mod.RESULTS:
        tag = "INFO" if name.startswith("info:") else ("PASS" if ok else "FAIL")
        tr.write_line(f"{tag}  [{crit:>2}] {name}" + (f"  ({detail})" if detail else ""))
    tr.write_line("")
    for line in mod.summary_lines():
        tr.write_line(line)
