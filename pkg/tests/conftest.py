def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, read from the ``criterion`` property of each test."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call" or ("criterion" in props and outcome == "error"):
                verdict = "PASS" if outcome == "passed" else "FAIL"
                lines.append((props["criterion"], verdict, props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(lines):
        terminalreporter.write_line(f"{verdict}  {name}  {detail}".rstrip())
