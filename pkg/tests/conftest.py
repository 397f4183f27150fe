from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance criterion as PASS or FAIL.

    The body may add measured values to the yielded dict; they are shown
    next to the verdict in the terminal summary.
    """
    results = request.config.stash[_RESULTS]

    @contextmanager
    def check(label):
        notes = {}
        try:
            yield notes
        except BaseException as exc:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else ""
            results.append(("FAIL", label, f"{type(exc).__name__} {first}".strip()))
            raise
        results.append(("PASS", label, ", ".join(f"{k}={v}" for k, v in notes.items())))

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for verdict, label, detail in results:
        line = f"{verdict} {label}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
