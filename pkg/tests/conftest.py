import numpy as np
import pandas as pd
import pytest

from dmem.timeseries import MacroSeries, PanelSeries, assign_periods

# (criterion, status, detail) rows printed at the end of the session
ACCEPTANCE_RESULTS: list[tuple[str, str, str]] = []


def make_series(rvol, ret=None, start="2005-01-03", freq="M", macro=None, K=None):
    """Panel on consecutive business days; ``macro`` values cover K lags before the first period."""
    rvol = np.asarray(rvol, dtype=float)
    ret = np.ones_like(rvol) if ret is None else np.asarray(ret, dtype=float)
    dates = pd.bdate_range(start, periods=rvol.size).to_numpy().astype("datetime64[D]")
    s = assign_periods(PanelSeries(dates, ret, rvol), freq)
    if macro is not None:
        uniq, _ = s.period_codes()
        values = np.asarray(macro, dtype=float)
        first = uniq[0] - (len(values) - uniq.size)
        s = PanelSeries(s.dates, s.ret, s.rvol, s.freq, s.period, s.day_in_period,
                        MacroSeries(s.freq, np.arange(first, first + len(values)), values))
    return s


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, status, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0])):
        terminalreporter.write_line(f"criterion {crit}: {status} - {detail}")
