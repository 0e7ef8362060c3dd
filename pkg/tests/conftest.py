import contextlib
import time

import pytest


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion.

    Yields a dict; anything stored under ``"detail"`` is appended to the line.
    """
    lines = request.config._criteria

    @contextlib.contextmanager
    def run(number, title):
        info = {"detail": ""}
        t0 = time.time()
        try:
            yield info
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            lines.append(f"criterion {number} FAIL  {title} ({time.time() - t0:.1f}s): {msg[:160]}")
            raise
        lines.append(f"criterion {number} PASS  {title} ({time.time() - t0:.1f}s) {info['detail']}".rstrip())
        print(lines[-1])

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria", [])
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(lines, key=lambda l: int(l.split()[1])):
        terminalreporter.write_line(line)
