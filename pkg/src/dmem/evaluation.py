"""
Forecast evaluation: losses, Ljung-Box, Model Confidence Set, rolling backtest
and long-run component comparisons.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from dmem.exceptions import DataError, DmemError
from dmem.mem import MeanPath
from dmem.timeseries import PanelSeries

logger = logging.getLogger(__name__)

__all__ = [
    "BacktestPlan",
    "ForecastRecord",
    "LossPanel",
    "McsResult",
    "aggregate_tau_monthly",
    "ljung_box",
    "loss_table",
    "mcs",
    "mse",
    "qlike",
    "rolling_backtest",
    "tau_correlations",
]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------
def qlike(proxy, fc):
    """Robust QLIKE on the volatility scale: ``p/f - ln(p/f) - 1``.

    Accepts scalars or arrays; zero exactly when ``fc == proxy``.
    """
    p = np.asarray(proxy, dtype=float)
    f = np.asarray(fc, dtype=float)
    if np.any(p <= 0) or np.any(f <= 0):
        raise DataError("QLIKE requires strictly positive proxy and forecast")
    r = p / f
    out = r - np.log(r) - 1.0
    return float(out) if out.ndim == 0 else out


def mse(proxy, fc):
    """Squared error ``(proxy - fc)**2``."""
    out = (np.asarray(proxy, dtype=float) - np.asarray(fc, dtype=float)) ** 2
    return float(out) if out.ndim == 0 else out


LOSSES: dict[str, Callable] = {"QLIKE": qlike, "MSE": mse}


# ---------------------------------------------------------------------------
# Ljung-Box
# ---------------------------------------------------------------------------
def ljung_box(x, lag: int) -> tuple[float, float]:
    """Ljung-Box portmanteau statistic and chi-square p-value.

    ``Q = N (N + 2) sum_{j <= lag} rho_j**2 / (N - j)`` with sample
    autocorrelations about the mean.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    lag = int(lag)
    if lag < 1:
        raise ValueError("lag must be >= 1")
    if n <= lag:
        raise DataError(f"series of length {n} too short for lag {lag}")
    d = x - x.mean()
    denom = float(d @ d)
    if denom <= 1e-300 * max(1.0, n):
        raise DataError("autocorrelation undefined for a constant series")
    rho = np.array([d[j:] @ d[:-j] for j in range(1, lag + 1)]) / denom
    q = float(n * (n + 2) * np.sum(rho**2 / (n - np.arange(1, lag + 1))))
    return q, float(stats.chi2.sf(q, lag))


# ---------------------------------------------------------------------------
# loss panels and MCS
# ---------------------------------------------------------------------------
@dataclass
class LossPanel:
    """Per-day losses of several models against a common target."""

    dates: np.ndarray
    models: list[str]
    kind: str
    losses: np.ndarray

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.losses = np.asarray(self.losses, dtype=float)
        self.models = list(self.models)
        if self.losses.shape != (self.dates.size, len(self.models)):
            raise ValueError("losses must be (days, models)")
        if not np.all(np.isfinite(self.losses)):
            raise DataError("loss panel has missing or non-finite cells")
        if np.any(self.losses < 0):
            raise DataError("losses must be nonnegative")
        if len(set(self.models)) != len(self.models):
            raise ValueError("duplicate model ids")

    @classmethod
    def from_forecasts(cls, dates, proxy, forecasts: dict[str, np.ndarray], kind: str = "QLIKE") -> LossPanel:
        fn = LOSSES[kind.upper()]
        models = list(forecasts)
        L = np.column_stack([fn(proxy, forecasts[m]) for m in models]) if models else np.empty((len(dates), 0))
        return cls(dates, models, kind.upper(), L)

    def select(self, mask) -> LossPanel:
        return LossPanel(self.dates[mask], self.models, self.kind, self.losses[mask])

    def mean(self) -> pd.Series:
        return pd.Series(self.losses.mean(axis=0), index=self.models)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.losses, columns=self.models)
        df.insert(0, "date", pd.to_datetime(self.dates))
        return df.melt(id_vars="date", var_name="model", value_name=self.kind.lower())

    def to_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            self.to_frame().to_csv(fh, index=False, float_format="%.17g", date_format="%Y-%m-%d")


@dataclass
class McsResult:
    survivors: list[str]
    elimination_order: list[str]
    pvalues: dict[str, float]
    alpha: float
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "survivors": self.survivors,
            "elimination_order": self.elimination_order,
            "pvalues": self.pvalues,
            "alpha": self.alpha,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _block_bootstrap_means(L: np.ndarray, B: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """Moving-block bootstrap sample means of each column; returns ``(B, M)``."""
    n, m = L.shape
    nb = -(-n // block)
    starts = rng.integers(0, n - block + 1, size=(B, nb))
    cs = np.vstack([np.zeros((1, m)), np.cumsum(L, axis=0)])
    full = cs[starts[:, :-1] + block] - cs[starts[:, :-1]]
    last_len = n - (nb - 1) * block
    last = cs[starts[:, -1] + last_len] - cs[starts[:, -1]]
    return (full.sum(axis=1) + last) / n


def _tsq_step(Lbar: np.ndarray, Lstar: np.ndarray):
    """``T_SQ``, its bootstrap draws and the pairwise t-matrix for one model set."""
    d = Lbar[:, None] - Lbar[None, :]
    dstar = Lstar[:, :, None] - Lstar[:, None, :]
    dev = dstar - d[None]
    var = np.mean(dev**2, axis=0)
    m = Lbar.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(var > 0, d / np.sqrt(var), np.where(d > 0, np.inf, np.where(d < 0, -np.inf, 0.0)))
        tstar = np.where(var[None] > 0, dev / np.sqrt(var)[None], 0.0)
    iu = np.triu_indices(m, 1)
    T = float(np.sum(t[iu] ** 2))
    Tstar = np.sum(tstar[:, iu[0], iu[1]] ** 2, axis=1)
    return T, Tstar, t


def mcs(
    panel: LossPanel,
    alpha: float = 0.25,
    B: int = 5000,
    block: int | None = None,
    seed: int = 0,
) -> McsResult:
    """Model Confidence Set with the semi-quadratic statistic.

    One set of moving-block bootstrap indices (drawn from ``seed``) is reused
    across all elimination rounds.  At each round the model with the largest
    ``max_j t_ij`` is eliminated; MCS p-values are the running maximum of the
    round p-values and the survivors are the models with p-value ``>= alpha``.
    """
    L = panel.losses
    n, m = L.shape
    if m < 1:
        raise ValueError("MCS needs at least one model")
    if m >= 2 and n < 50:
        raise DataError("MCS needs at least 50 loss observations")
    block = int(math.ceil(n ** (1 / 3))) if block is None else int(block)
    if not 1 <= block <= n:
        raise ValueError("block length must lie in [1, N]")
    settings = {"replications": int(B), "block_length": block, "seed": int(seed), "statistic": "T_SQ"}
    if m == 1:
        return McsResult(list(panel.models), [], {panel.models[0]: 1.0}, alpha, settings)
    rng = np.random.default_rng(seed)
    Lstar_all = _block_bootstrap_means(L, int(B), block, rng)
    Lbar_all = L.mean(axis=0)
    alive = list(range(m))
    order, pvals = [], {}
    running = 0.0
    while len(alive) > 1:
        idx = np.array(alive)
        T, Tstar, t = _tsq_step(Lbar_all[idx], Lstar_all[:, idx])
        p = 1.0 if T == 0 else float(np.mean(Tstar >= T))
        running = max(running, p)
        worst = alive[int(np.argmax(t.max(axis=1)))]
        pvals[panel.models[worst]] = running
        order.append(panel.models[worst])
        alive.remove(worst)
    pvals[panel.models[alive[0]]] = 1.0
    survivors = [mname for mname in panel.models if pvals[mname] >= alpha]
    return McsResult(survivors, order, {k: pvals[k] for k in panel.models}, float(alpha), settings)


def loss_table(panel: LossPanel, alpha: float = 0.25, B: int = 5000, seed: int = 0,
               block: int | None = None) -> pd.DataFrame:
    """Mean losses per calendar year and over the full sample, with MCS flags.

    Long format: ``period, model, loss, mean, in_mcs, mcs_pvalue``.
    """
    years = pd.DatetimeIndex(panel.dates).year.to_numpy()
    rows = []
    groups = [(str(y), years == y) for y in np.unique(years)] + [("Full", np.ones(years.size, bool))]
    for label, mask in groups:
        sub = panel.select(mask)
        if sub.losses.shape[0] >= 50 or len(panel.models) == 1:
            res = mcs(sub, alpha=alpha, B=B, block=block, seed=seed)
            flags, pv = set(res.survivors), res.pvalues
        else:
            flags, pv = set(), {mname: float("nan") for mname in panel.models}
        means = sub.losses.mean(axis=0)
        for j, mname in enumerate(panel.models):
            rows.append({
                "period": label,
                "model": mname,
                "loss": panel.kind,
                "mean": float(means[j]),
                "in_mcs": mname in flags,
                "mcs_pvalue": pv[mname],
            })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# rolling backtest
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BacktestPlan:
    """Rolling estimation windows of ``window`` days refitted every ``stride`` days."""

    window: int = 3000
    stride: int = 42
    horizon: int = 1
    models: tuple[str, ...] = ()

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be positive")
        if self.horizon != 1:
            raise ValueError("only one-step-ahead forecasts are supported")
        object.__setattr__(self, "models", tuple(self.models))

    def origins(self, n: int) -> list[int]:
        """Window starts ``0, stride, ...`` while the window leaves data to forecast."""
        if self.window + self.stride > n:
            raise DataError(f"plan needs window + stride <= {n} observations")
        return list(range(0, n - self.window, self.stride))


@dataclass(frozen=True)
class ForecastRecord:
    date: np.datetime64
    model: str
    refit: int
    origin: int
    forecast: float
    proxy: float
    carried: bool = False


def _default_fitter(model_id: str, estimator: str | None):
    from dmem import benchmarks, inference

    key = model_id.lower()
    if key in benchmarks.BENCHMARKS:
        return lambda s: benchmarks.fit_benchmark(s, key)
    fit = {
        None: inference.fit_ml_gamma,
        "ml_gamma": inference.fit_ml_gamma,
        "gmm": inference.fit_gmm,
        "ml_lognormal": inference.fit_ml_lognormal,
    }[estimator]
    model = inference.get_model(key)
    return lambda s: fit(s, model)


def rolling_backtest(
    series: PanelSeries,
    plan: BacktestPlan,
    estimators: dict[str, str] | None = None,
    fitters: dict[str, Callable] | None = None,
    loss: str = "QLIKE",
) -> tuple[list[ForecastRecord], LossPanel]:
    """Rolling-window one-step-ahead forecasts and their losses.

    At each origin ``s`` every model is fitted on days ``[s, s + window)`` and
    then run forward, with parameters frozen, over the next ``stride`` days;
    the forecast for day ``d`` uses observations up to ``d - 1`` only.

    ``fitters`` maps a model id to ``f(window_series) -> FitResult``; by default
    DMEM ids use ``estimators`` (``ml_gamma``, ``gmm`` or ``ml_lognormal``) and
    benchmark ids their own estimator.  A failed fit reuses the previous
    successful fit; a model whose first fit fails is dropped.
    """
    n = len(series)
    origins = plan.origins(n)
    estimators = estimators or {}
    fitters = dict(fitters or {})
    for mid in plan.models:
        if mid not in fitters:
            fitters[mid] = _default_fitter(mid, estimators.get(mid))
    W, S = plan.window, plan.stride
    forecasts: dict[str, list[np.ndarray]] = {m: [] for m in plan.models}
    records: list[ForecastRecord] = []
    last: dict[str, tuple] = {}
    dropped: set[str] = set()
    for r, s in enumerate(origins):
        stop = min(s + W + S, n)
        for mid in plan.models:
            if mid in dropped:
                continue
            carried = False
            try:
                fit = fitters[mid](series.window(s, s + W))
                last[mid] = (fit, s)
            except DmemError as exc:
                if mid not in last:
                    logger.warning("dropping %s: first fit failed (%s)", mid, exc)
                    dropped.add(mid)
                    continue
                logger.warning("%s fit failed at origin %d (%s); carrying previous fit", mid, s, exc)
                carried = True
            fit, s_fit = last[mid]
            ext = series.window(s_fit, stop)
            vol = fit.spec.vol_path(ext, fit.theta, fit.init)[s + W - s_fit:]
            forecasts[mid].append(vol)
            for k, v in enumerate(vol):
                d = s + W + k
                records.append(ForecastRecord(series.dates[d], mid, r, s, float(v), float(series.rvol[d]), carried))
    kept = [m for m in plan.models if m not in dropped]
    days = np.arange(W, n)
    fc = {m: np.concatenate(forecasts[m]) for m in kept}
    panel = LossPanel.from_forecasts(series.dates[days], series.rvol[days], fc, loss)
    return [rec for rec in records if rec.model in kept], panel


def records_frame(records: Iterable[ForecastRecord]) -> pd.DataFrame:
    return pd.DataFrame([rec.__dict__ for rec in records])


# ---------------------------------------------------------------------------
# long-run components
# ---------------------------------------------------------------------------
def aggregate_tau_monthly(tau, series: PanelSeries | None = None, codes=None, labels=None) -> pd.Series:
    """Average the daily ``tau`` within each period.

    ``tau`` may be a :class:`MeanPath` or an array; periods come from
    ``series`` (or explicit integer ``codes`` and ``labels``).  A ``tau``
    already constant within periods is returned unchanged at period level.
    """
    t = np.asarray(tau.tau if isinstance(tau, MeanPath) else tau, dtype=float)
    if series is not None:
        _, codes = series.period_codes()
        labels = series.period_labels()
    if codes is None:
        raise ValueError("period codes required")
    codes = np.asarray(codes)
    if codes.size != t.size:
        raise ValueError("tau and period codes differ in length")
    g = pd.Series(t).groupby(codes, sort=True)
    lo, hi = g.min().to_numpy(), g.max().to_numpy()
    # period-constant input passes through without rounding
    means = np.where(lo == hi, lo, g.mean().to_numpy())
    idx = labels if labels is not None else np.unique(codes)
    return pd.Series(means, index=pd.Index(idx, name="period"), name="tau")


def tau_correlations(taus: dict[tuple[str, str], Sequence[float]]) -> pd.DataFrame:
    """Pearson correlations of monthly long-run components.

    ``taus`` maps ``(model, index)`` to an aligned monthly series.  Returns one
    row per pair sharing a model (across indices) or an index (across models).
    """
    keys = list(taus)
    arrays = {k: np.asarray(taus[k], dtype=float) for k in keys}
    lengths = {a.size for a in arrays.values()}
    if len(lengths) > 1:
        raise DataError(f"tau series differ in length: {sorted(lengths)}")
    rows = []
    for i, ka in enumerate(keys):
        for kb in keys[i:]:
            same_model, same_index = ka[0] == kb[0], ka[1] == kb[1]
            if ka != kb and not (same_model or same_index):
                continue
            rel = "self" if ka == kb else ("within-model" if same_model else "between-model")
            rows.append({
                "model_a": ka[0], "index_a": ka[1], "model_b": kb[0], "index_b": kb[1],
                "relation": rel, "corr": float(np.corrcoef(arrays[ka], arrays[kb])[0, 1]),
            })
    return pd.DataFrame(rows)
