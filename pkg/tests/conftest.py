def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if not REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(REPORT):
        ok, detail = REPORT[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
