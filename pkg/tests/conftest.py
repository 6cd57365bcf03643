import _support


def pytest_terminal_summary(terminalreporter):
    if not _support.CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_support.CRITERIA):
        ok, detail = _support.CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
