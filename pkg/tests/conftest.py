import pytest


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Echo one PASS/FAIL line per acceptance criterion to the terminal."""
    outcome = yield
    report = outcome.get_result()
    line = getattr(item, "acceptance_line", None)
    if line and report.when == "call":
        writer = item.config.pluginmanager.get_plugin("terminalreporter")
        if writer is not None:
            status = "PASS" if report.passed else "FAIL"
            writer.write_line(f"[{status}] {line}")
