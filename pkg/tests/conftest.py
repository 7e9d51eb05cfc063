import datetime as dt

import numpy as np
import pytest

from admatch.core import DailySeries

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def make_series(n=10, start="2004-01-01", exposure=None, temperature=None, humidity=None,
                influenza=None, holiday=None, outcomes=None):
    dates = np.datetime64(start, "D") + np.arange(n)
    return DailySeries(
        dates=dates,
        exposure=np.full(n, 30.0) if exposure is None else exposure,
        temperature=np.full(n, 15.0) if temperature is None else temperature,
        humidity=np.full(n, 60.0) if humidity is None else humidity,
        influenza=np.zeros(n, bool) if influenza is None else influenza,
        holiday=np.zeros(n, bool) if holiday is None else holiday,
        outcomes={("cv", "old"): np.arange(n)} if outcomes is None else outcomes,
    )


@pytest.fixture
def small_series():
    return make_series()


@pytest.fixture(scope="session")
def synth_year():
    from admatch.synth import SynthSpec, generate
    return generate(SynthSpec(n_days=365), seed=3)
