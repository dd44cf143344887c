import contextlib

ACCEPTANCE = {}


@contextlib.contextmanager
def criterion(number, title):
    """Record the outcome of one acceptance criterion; failures still propagate."""
    try:
        yield
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title)
        print(f"criterion {number}: FAIL  {title}")
        raise
    ACCEPTANCE[number] = ("PASS", title)
    print(f"criterion {number}: PASS  {title}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, title = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {title}")
