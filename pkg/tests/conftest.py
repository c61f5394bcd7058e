import os

os.environ.setdefault("CROSSREG_DETERMINISTIC", "1")

from hypothesis import settings  # noqa: E402

settings.register_profile("crossreg", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("crossreg")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
