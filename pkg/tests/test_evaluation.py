import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats
from statsmodels.stats.diagnostic import acorr_ljungbox

from dmem.evaluation import (
    BacktestPlan,
    LossPanel,
    _block_bootstrap_means,
    aggregate_tau_monthly,
    ljung_box,
    loss_table,
    mcs,
    mse,
    qlike,
    records_frame,
    rolling_backtest,
    tau_correlations,
)
from dmem.exceptions import ConvergenceError, DataError
from dmem.inference import FitResult, get_model
from dmem.mem import AmemParams, GammaErrors, MidasLongRunParams, ShortRunParams, filter_mem_midas, simulate
from dmem.midas import BetaLag

from conftest import make_series


class TestLosses:
    def test_qlike_examples(self):
        assert qlike(10.0, 10.0) == 0.0
        assert qlike(12.0, 10.0) == pytest.approx(1.2 - math.log(1.2) - 1)
        assert qlike(12.0, 10.0) == pytest.approx(0.017679, abs=1e-6)
        assert qlike(10.0, 12.0) == pytest.approx(10 / 12 - math.log(10 / 12) - 1)
        assert qlike(10.0, 12.0) == pytest.approx(0.015656, abs=2e-6)

    @pytest.mark.parametrize("p, f", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_qlike_nonpositive(self, p, f):
        with pytest.raises(DataError):
            qlike(p, f)

    def test_mse_examples(self):
        assert mse(3.0, 3.0) == 0.0
        assert mse(12.0, 10.0) == 4.0
        assert mse(0.0, 1.0) == 1.0

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-2, 1e2))
    @settings(max_examples=200, deadline=None)
    def test_qlike_nonnegative_and_scale_free(self, p, f, c):
        v = qlike(p, f)
        assert v >= 0
        assert qlike(c * p, c * f) == pytest.approx(v, rel=1e-9, abs=1e-12)

    def test_vectorized(self):
        assert_allclose(qlike([12.0, 10.0], [10.0, 12.0]), [qlike(12.0, 10.0), qlike(10.0, 12.0)])


class TestLjungBox:
    def test_zero_autocorrelation(self):
        q, p = ljung_box(np.array([1.0, 0.0, -1.0, 0.0]), 1)
        assert q == 0.0 and p == 1.0

    @pytest.mark.parametrize("lag", [1, 5, 10, 20])
    def test_matches_statsmodels(self, rng, lag):
        x = rng.standard_t(5, 800)
        q, p = ljung_box(x, lag)
        ref = acorr_ljungbox(x, lags=[lag])
        assert q == pytest.approx(float(ref["lb_stat"].iloc[0]), rel=1e-10)
        assert p == pytest.approx(float(ref["lb_pvalue"].iloc[0]), rel=1e-8, abs=1e-300)

    def test_uniform_under_null(self):
        ps = [ljung_box(np.random.default_rng(s).standard_normal(5000), 10)[1] for s in range(500)]
        assert stats.kstest(ps, "uniform").pvalue > 0.01

    def test_power_ar1(self, rng):
        e = rng.standard_normal(5000)
        x = np.empty(5000)
        x[0] = e[0]
        for i in range(1, 5000):
            x[i] = 0.5 * x[i - 1] + e[i]
        assert ljung_box(x, 10)[1] < 1e-3

    @given(st.floats(0.1, 100), st.floats(-100, 100))
    @settings(max_examples=30, deadline=None)
    def test_affine_invariance(self, a, b):
        x = np.random.default_rng(0).standard_normal(300)
        assert ljung_box(a * x + b, 5)[0] == pytest.approx(ljung_box(x, 5)[0], rel=1e-8)

    def test_constant(self):
        with pytest.raises(DataError, match="constant"):
            ljung_box(np.full(50, 2.0), 5)

    def test_too_short(self):
        with pytest.raises(DataError):
            ljung_box(np.arange(5.0), 5)


def panel(losses, models=None, start="2005-01-03"):
    losses = np.asarray(losses, dtype=float)
    dates = pd.bdate_range(start, periods=losses.shape[0]).to_numpy().astype("datetime64[D]")
    return LossPanel(dates, models or [chr(65 + j) for j in range(losses.shape[1])], "QLIKE", losses)


class TestLossPanel:
    def test_from_forecasts(self):
        dates = np.array(["2005-01-03", "2005-01-04"], dtype="datetime64[D]")
        p = LossPanel.from_forecasts(dates, np.array([12.0, 10.0]), {"a": np.array([10.0, 10.0])})
        assert_allclose(p.losses[:, 0], [qlike(12, 10), 0.0])

    def test_rejects_missing(self):
        with pytest.raises(DataError):
            panel([[0.1, np.nan]] * 3)

    def test_rejects_negative(self):
        with pytest.raises(DataError):
            panel([[0.1, -0.1]] * 3)

    def test_frame_and_csv(self, tmp_path):
        p = panel(np.arange(6.0).reshape(3, 2))
        df = p.to_frame()
        assert list(df.columns) == ["date", "model", "qlike"] and len(df) == 6
        p.to_csv(tmp_path / "l.csv", header_lines=["x 1"])
        text = (tmp_path / "l.csv").read_text().splitlines()
        assert text[0] == "# x 1" and text[1] == "date,model,qlike"


class TestMcs:
    def test_strict_dominance(self, rng):
        b = rng.gamma(2, 1, 500) + 0.5
        a = b - rng.uniform(0.01, 0.4, 500)
        res = mcs(panel(np.column_stack([a, b])), alpha=0.25, B=1000, seed=1)
        assert res.survivors == ["A"]
        assert res.elimination_order == ["B"]

    def test_identical_losses(self, rng):
        b = rng.gamma(2, 1, 300)
        res = mcs(panel(np.column_stack([b, b])), B=500)
        assert res.survivors == ["A", "B"]
        assert res.pvalues == {"A": 1.0, "B": 1.0}

    def test_single_model(self, rng):
        res = mcs(panel(rng.gamma(2, 1, (20, 1))))
        assert res.survivors == ["A"] and res.pvalues["A"] == 1.0

    def test_deterministic_under_seed(self, rng):
        L = rng.gamma(2, 1, (400, 4))
        p = panel(L)
        assert mcs(p, B=500, seed=3).to_dict() == mcs(p, B=500, seed=3).to_dict()

    def test_pvalues_monotone_in_elimination_order(self, rng):
        L = rng.gamma(2, 1, (400, 5)) + np.linspace(0, 0.2, 5)
        res = mcs(panel(L), B=1000, seed=2)
        seq = [res.pvalues[m] for m in res.elimination_order]
        assert all(x <= y for x, y in zip(seq, seq[1:]))
        assert set(res.survivors) == {m for m, pv in res.pvalues.items() if pv >= 0.25}

    def test_smaller_alpha_keeps_more(self, rng):
        L = rng.gamma(2, 1, (400, 4)) + np.array([0, 0.05, 0.1, 0.3])
        p = panel(L)
        assert set(mcs(p, alpha=0.25, B=1000, seed=0).survivors) <= set(mcs(p, alpha=0.05, B=1000, seed=0).survivors)

    def test_block_bootstrap_against_loop(self, rng):
        L = rng.normal(size=(23, 2))
        B, block = 7, 5
        got = _block_bootstrap_means(L, B, block, np.random.default_rng(9))
        starts = np.random.default_rng(9).integers(0, 23 - block + 1, size=(B, 5))
        ref = np.empty((B, 2))
        for b in range(B):
            idx = np.concatenate([np.arange(s, s + block) for s in starts[b]])[:23]
            ref[b] = L[idx].mean(axis=0)
        assert_allclose(got, ref, rtol=1e-12)

    def test_short_panel(self, rng):
        with pytest.raises(DataError):
            mcs(panel(rng.gamma(2, 1, (20, 2))))

    def test_loss_table(self, rng):
        L = rng.gamma(2, 1, (600, 2))
        tab = loss_table(panel(L), B=200)
        assert list(tab["period"].unique()) == ["2005", "2006", "2007", "Full"]
        full = tab[tab.period == "Full"]
        assert_allclose(full["mean"], L.mean(axis=0))
        assert full["in_mcs"].any()


def const_fitter(series):
    class Const:
        def vol_path(self, s, theta, init):
            return np.full(len(s), theta[0])

    return FitResult("const", "mean", ["c"], np.array([float(np.mean(series.rvol))]), spec=Const())


class TestBacktest:
    def test_index_arithmetic(self):
        assert BacktestPlan(3000, 42).origins(3084) == [0, 42]
        s = make_series(np.full(3084, 2.0))
        recs, p = rolling_backtest(s, BacktestPlan(3000, 42, models=("c1", "c2")),
                                   fitters={"c1": const_fitter, "c2": const_fitter})
        df = records_frame(recs)
        assert df.groupby("model").size().to_dict() == {"c1": 84, "c2": 84}
        assert sorted(df.refit.unique()) == [0, 1]
        assert p.losses.shape == (84, 2)
        assert_array_equal(p.losses, 0.0)

    def test_partial_last_stride(self):
        s = make_series(np.full(3100, 2.0))
        assert BacktestPlan(3000, 42).origins(3100) == [0, 42, 84]
        _, p = rolling_backtest(s, BacktestPlan(3000, 42, models=("c",)), fitters={"c": const_fitter})
        assert p.losses.shape == (100, 1)

    def test_plan_too_long(self):
        with pytest.raises(DataError):
            BacktestPlan(3000, 42).origins(3041)

    def test_failed_fit_carried(self, rng):
        s = make_series(rng.gamma(2, 1, 300))
        calls = {"n": 0}

        def flaky(series):
            calls["n"] += 1
            if calls["n"] == 2:
                raise ConvergenceError("no", best={})
            return const_fitter(series)

        recs, p = rolling_backtest(s, BacktestPlan(200, 30, models=("f",)), fitters={"f": flaky})
        df = records_frame(recs)
        assert df[df.refit == 1].carried.all() and not df[df.refit != 1].carried.any()
        # carried forecasts come from the first fit
        assert_allclose(df[df.refit == 1].forecast, s.rvol[:200].mean())

    def test_first_failure_drops(self, rng):
        s = make_series(rng.gamma(2, 1, 300))

        def bad(series):
            raise ConvergenceError("no", best={})

        recs, p = rolling_backtest(s, BacktestPlan(200, 50, models=("bad", "c")),
                                   fitters={"bad": bad, "c": const_fitter})
        assert p.models == ["c"]
        assert {r.model for r in recs} == {"c"}

    def test_amem_close_to_oracle(self):
        truth = AmemParams(ShortRunParams(0.15, 0.1, 0.75), 10.0)
        s = simulate("amem", truth, GammaErrors(5.0), 3000, seed=5, burn_in=500)
        recs, p = rolling_backtest(s, BacktestPlan(2000, 250, models=("amem",)))
        oracle = s.meta["path"].mu[2000:]
        q_true = qlike(s.rvol[2000:], oracle).mean()
        assert abs(p.losses[:, 0].mean() / q_true - 1) < 0.10

    def test_forecasts_use_frozen_parameters(self):
        s = simulate("amem", AmemParams(ShortRunParams(0.15, 0.1, 0.75), 10.0), GammaErrors(5.0), 1300, seed=6)
        recs, _ = rolling_backtest(s, BacktestPlan(1000, 150, models=("amem",)))
        df = records_frame(recs)
        from dmem.inference import fit_ml_gamma

        fit = fit_ml_gamma(s.window(150, 1150), "amem")
        ext = get_model("amem").vol_path(s.window(150, 1300), fit.theta, fit.init)
        assert_allclose(df[df.refit == 1].forecast, ext[1000:], rtol=1e-12)


class TestLongRun:
    def test_constant_within_month(self):
        s = make_series(np.ones(45))
        out = aggregate_tau_monthly(np.full(45, 3.5), s)
        assert_allclose(out.to_numpy(), 3.5)
        assert list(out.index) == ["2005-01", "2005-02", "2005-03"]

    def test_two_day_average(self):
        out = aggregate_tau_monthly(np.array([8.0, 12.0]), codes=[0, 0], labels=["m"])
        assert out.iloc[0] == 10.0

    def test_midas_identity(self, rng):
        s = make_series(rng.gamma(2, 5, 130), macro=rng.normal(size=20))
        path = filter_mem_midas(s, ShortRunParams(0.1, 0, 0.8), MidasLongRunParams(1.0, 0.5, BetaLag(6, 1, 2)))
        out = aggregate_tau_monthly(path, s)
        _, codes = s.period_codes()
        first = np.r_[0, np.flatnonzero(np.diff(codes)) + 1]
        assert_array_equal(out.to_numpy(), path.tau[first])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            aggregate_tau_monthly(np.ones(3), codes=[0, 1])

    def test_correlations(self, rng):
        a = rng.normal(size=60)
        tab = tau_correlations({("cmem", "SPX"): a, ("midas", "SPX"): -a, ("cmem", "NDX"): a + 0.1 * rng.normal(size=60)})
        rel = {(r.model_a, r.index_a, r.model_b, r.index_b): (r.relation, r.corr) for r in tab.itertuples()}
        assert rel[("cmem", "SPX", "cmem", "SPX")] == ("self", 1.0)
        assert rel[("cmem", "SPX", "midas", "SPX")][0] == "between-model"
        assert rel[("cmem", "SPX", "midas", "SPX")][1] == pytest.approx(-1.0)
        assert rel[("cmem", "SPX", "cmem", "NDX")][0] == "within-model"
        assert ("midas", "SPX", "cmem", "NDX") not in rel

    def test_common_factor(self, rng):
        f = rng.normal(size=120)
        tab = tau_correlations({("m", "A"): f + 0.2 * rng.normal(size=120), ("m", "B"): f + 0.2 * rng.normal(size=120)})
        assert tab[tab.relation == "within-model"]["corr"].iloc[0] > 0.9

    def test_correlation_length_mismatch(self):
        with pytest.raises(DataError):
            tau_correlations({("a", "x"): np.ones(3), ("a", "y"): np.ones(4)})
