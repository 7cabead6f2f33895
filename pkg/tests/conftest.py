from __future__ import annotations

import numpy as np
import pytest

from rbess.cell import CellParams, CellState, ThermalNetworkParams
from rbess.ocv import OcvCurve


@pytest.fixture
def linear_curve():
    return OcvCurve.linear(3.3, 0.6)


@pytest.fixture
def linear_cell(linear_curve):
    # alpha=3.3, beta=0.6, 2.5 Ah: c_equiv = 9000 / 0.6 = 15000
    return CellParams(ocv=linear_curve)


@pytest.fixture
def net():
    return ThermalNetworkParams()


def uniform_states(n, q=0.5, temp=298.0):
    return [CellState(q=q, temp=temp) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def report():
    def _report(criterion: str, ok: bool, detail: str = ""):
        ok = bool(ok)
        prev = ACCEPTANCE.get(criterion)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}" if detail else prev[1]
        ACCEPTANCE[criterion] = (ok, detail)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0].rstrip("abcde")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
