ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_RESULTS.append((name, f"{status}{' - ' + detail if detail else ''}"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, status in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status.split(' ')[0]:>4}  {name}"
                                    + (f"  [{status.split(' - ', 1)[1]}]" if " - " in status else ""))
