import numpy as np
import pytest

from proxdiff.schedule import NoiseSchedule

ACCEPTANCE_IDS = ("A1", "A2", "A3", "A4", "A5", "A6", "A7")


@pytest.fixture
def sched():
    return NoiseSchedule()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def acceptance(request):
    """``acceptance(cid, ok, detail)`` records a criterion outcome, prints it and asserts it."""
    results = request.config.acceptance_results

    def report(cid, ok, detail):
        ok = bool(ok)
        if not ok or cid not in results:
            results[cid] = (ok, detail)
        elif results[cid][0]:
            results[cid] = (ok, f"{results[cid][1]}; {detail}")
        print(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, f"{cid}: {detail}"

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.acceptance_results
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in ACCEPTANCE_IDS:
        if cid in results:
            ok, detail = results[cid]
            terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}: {detail}")
        else:
            terminalreporter.write_line(f"{cid} NOT RUN: deselected or errored before reporting")
