def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per release criterion at the end of the run."""
    lines = []
    for outcome, label in (("passed", "PASS"), ("failed", "FAIL"),
                           ("error", "FAIL")):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            lines.append((nodeid.split("::")[-1], label))
    if lines:
        terminalreporter.write_sep("-", "release criteria")
        for name, label in sorted(lines):
            terminalreporter.write_line(f"{label}  {name}")
