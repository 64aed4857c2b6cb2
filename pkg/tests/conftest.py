import numpy as np
import pytest

from pobds.core import GrnModel
from pobds.rnaseq import RnaSeqModel


def pytest_configure(config):
    config.addinivalue_line("markers", "invariant: module invariant and property checks")
    config.addinivalue_line("markers", "acceptance: long-running acceptance criteria")


def build_models(inst):
    """Package models for an instance produced by ``oracles.random_instance``."""
    grn = GrnModel(inst["a"], inst["b"], inst["p"])
    obs = RnaSeqModel(inst["s"], inst["mu"], inst["delta"], inst["phi"])
    return grn, obs


@pytest.fixture
def toy():
    """A fixed three-gene model with a short informative count series."""
    grn = GrnModel([[0, 1, 0], [-1, 0, 1], [1, 1, -1]], [-0.5, 0.5, -0.5], 0.1)
    obs = RnaSeqModel(1.0, 0.5, [2.0, 1.5, 2.5], [5.0, 3.0, 8.0])
    ys = np.array([[3, 1, 9], [0, 6, 2], [8, 2, 1], [1, 1, 12], [5, 0, 0], [2, 9, 4], [0, 0, 7], [6, 3, 3],
                   [1, 7, 0], [4, 2, 10]])
    return grn, obs, ys


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record a one-line PASS/FAIL verdict for an acceptance criterion."""

    def _report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
