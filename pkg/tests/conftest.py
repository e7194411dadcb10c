import sys


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.split(".")[-1] == "test_acceptance"), None)
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(results):
        ok, detail = results[crit]
        terminalreporter.write_line(f"{crit}: {'PASS' if ok else 'FAIL'}  {detail}")
