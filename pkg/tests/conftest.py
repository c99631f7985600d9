acceptance_results = []


def record_criterion(number, description, passed, detail=""):
    acceptance_results.append((number, description, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, passed, detail in sorted(acceptance_results):
        status = "PASS" if passed else "FAIL"
        suffix = f" | {detail}" if detail else ""
        terminalreporter.write_line(f"criterion {number} {status} - {description}{suffix}")
