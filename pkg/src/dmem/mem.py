"""
Conditional-mean recursions for the asymmetric MEM and its two-component
extensions.

All three models write the daily realized volatility as
``x_{i,t} = tau_{i,t} * xi_{i,t} * eps_{i,t}`` with a unit-mean error.  The
short-run factor ``xi`` follows a mean-one GARCH-type recursion driven by
``x / tau``; the long-run factor ``tau`` is

* a constant (AMEM, with the level targeted at the sample mean),
* a daily recursion driven by ``x / xi`` (Component-MEM), or
* a period-constant ``exp(m + zeta * sum_k delta_k X_{t-k})`` (MEM-MIDAS).

State carries across period boundaries: day 1 of period ``t`` conditions on
the last day of period ``t - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numba
import numpy as np
import pandas as pd

from dmem.exceptions import ConstraintError, DataError, MomentError
from dmem.midas import BetaLag, beta_weights
from dmem.timeseries import MacroSeries, PanelSeries, assign_periods

__all__ = [
    "AmemParams",
    "ComponentParams",
    "FilterState",
    "GammaErrors",
    "LogNormalErrors",
    "LongRunComponentParams",
    "MeanPath",
    "MidasLongRunParams",
    "MidasParams",
    "ShortRunParams",
    "component_stationarity",
    "filter_amem",
    "filter_component",
    "filter_mem_midas",
    "forecast_one_step",
    "midas_tau",
    "simulate",
    "xi_second_moment",
]


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ShortRunParams:
    """Short-run (mean-one) recursion coefficients.

    The intercept is targeted at ``1 - alpha1 - gamma1/2 - beta1`` so that
    ``E(xi) = 1``; ``delta1`` loads an optional de-meaned regressor.
    """

    alpha1: float
    gamma1: float
    beta1: float
    delta1: float = 0.0

    @property
    def persistence(self) -> float:
        return self.alpha1 + self.gamma1 / 2 + self.beta1

    @property
    def intercept(self) -> float:
        return 1.0 - self.persistence

    def check(self) -> None:
        bad = [f"{n} must be >= 0" for n in ("alpha1", "gamma1", "beta1") if getattr(self, n) < 0]
        if self.intercept <= 0:
            bad.append(
                f"intercept 1 - alpha1 - gamma1/2 - beta1 = {self.intercept:.6g} must be > 0"
            )
        if bad:
            raise ConstraintError("; ".join(bad))


@dataclass(frozen=True)
class LongRunComponentParams:
    omega_tau: float
    alpha1_tau: float
    gamma1_tau: float
    beta1_tau: float

    @property
    def persistence(self) -> float:
        return self.alpha1_tau + self.gamma1_tau / 2 + self.beta1_tau

    def check(self) -> None:
        bad = [
            f"{n} must be >= 0"
            for n in ("alpha1_tau", "gamma1_tau", "beta1_tau")
            if getattr(self, n) < 0
        ]
        if not self.omega_tau > 0:
            bad.append(f"omega_tau = {self.omega_tau:.6g} must be > 0")
        if self.persistence >= 1:
            bad.append(f"long-run persistence {self.persistence:.6g} must be < 1")
        if bad:
            raise ConstraintError("; ".join(bad))


@dataclass(frozen=True)
class MidasLongRunParams:
    m: float
    zeta: float
    lag: BetaLag


@dataclass(frozen=True)
class AmemParams:
    short: ShortRunParams
    level: float | None = None


@dataclass(frozen=True)
class ComponentParams:
    short: ShortRunParams
    long: LongRunComponentParams


@dataclass(frozen=True)
class MidasParams:
    short: ShortRunParams
    long: MidasLongRunParams


ModelParams = Union[AmemParams, ComponentParams, MidasParams]


@dataclass(frozen=True)
class MeanPath:
    """Filtered conditional mean and its two factors, plus ``x / mu``."""

    mu: np.ndarray
    tau: np.ndarray
    xi: np.ndarray
    residuals: np.ndarray

    def tail_state(self, series: PanelSeries, z=None) -> FilterState:
        return FilterState(
            x=float(series.rvol[-1]),
            neg=bool(series.ret[-1] < 0),
            xi=float(self.xi[-1]),
            tau=float(self.tau[-1]),
            z=0.0 if z is None else float(np.asarray(z)[-1]),
            period=None if series.period is None else int(series.period[-1]),
        )


@dataclass(frozen=True)
class FilterState:
    """Last-day quantities needed for a one-step forecast."""

    x: float
    neg: bool
    xi: float
    tau: float
    z: float = 0.0
    period: int | None = None


# ---------------------------------------------------------------------------
# recursions
# ---------------------------------------------------------------------------
@numba.njit(cache=True)
def _xi_recursion(driver, neg, z, alpha, gamma, beta, delta, xi0):  # pragma: no cover - jitted
    n = driver.shape[0]
    xi = np.empty(n)
    if n == 0:
        return xi
    c = 1.0 - alpha - 0.5 * gamma - beta
    xi[0] = xi0
    for i in range(1, n):
        xi[i] = c + (alpha + gamma * neg[i - 1]) * driver[i - 1] + beta * xi[i - 1] + delta * z[i - 1]
    return xi


@numba.njit(cache=True)
def _component_recursion(x, neg, z, a, g, b, d, w, at, gt, bt, xi0, tau0):  # pragma: no cover
    n = x.shape[0]
    xi = np.empty(n)
    tau = np.empty(n)
    if n == 0:
        return xi, tau
    c = 1.0 - a - 0.5 * g - b
    xi[0] = xi0
    tau[0] = tau0
    for i in range(1, n):
        xi[i] = c + (a + g * neg[i - 1]) * x[i - 1] / tau[i - 1] + b * xi[i - 1] + d * z[i - 1]
        tau[i] = w + (at + gt * neg[i - 1]) * x[i - 1] / xi[i - 1] + bt * tau[i - 1]
    return xi, tau


@numba.njit(cache=True)
def _simulate_xi(tau, eps, neg, z, alpha, gamma, beta, delta, xi0):  # pragma: no cover
    n = eps.shape[0]
    xi = np.empty(n)
    x = np.empty(n)
    c = 1.0 - alpha - 0.5 * gamma - beta
    xi[0] = xi0
    x[0] = tau[0] * xi0 * eps[0]
    for i in range(1, n):
        xi[i] = c + (alpha + gamma * neg[i - 1]) * x[i - 1] / tau[i - 1] + beta * xi[i - 1] + delta * z[i - 1]
        x[i] = tau[i] * xi[i] * eps[i]
    return xi, x


@numba.njit(cache=True)
def _simulate_component(eps, neg, z, a, g, b, d, w, at, gt, bt, xi0, tau0):  # pragma: no cover
    n = eps.shape[0]
    xi = np.empty(n)
    tau = np.empty(n)
    x = np.empty(n)
    c = 1.0 - a - 0.5 * g - b
    xi[0] = xi0
    tau[0] = tau0
    x[0] = tau0 * xi0 * eps[0]
    for i in range(1, n):
        xi[i] = c + (a + g * neg[i - 1]) * x[i - 1] / tau[i - 1] + b * xi[i - 1] + d * z[i - 1]
        tau[i] = w + (at + gt * neg[i - 1]) * x[i - 1] / xi[i - 1] + bt * tau[i - 1]
        x[i] = tau[i] * xi[i] * eps[i]
    return xi, tau, x


def xi_step(short: ShortRunParams, driver: float, neg: bool, xi_prev: float, z: float = 0.0) -> float:
    """One step of the mean-one short-run recursion."""
    a = short.alpha1 + (short.gamma1 if neg else 0.0)
    return short.intercept + a * driver + short.beta1 * xi_prev + short.delta1 * z


def _z_array(z, n: int) -> np.ndarray:
    if z is None:
        return np.zeros(n)
    z = np.asarray(z, dtype=float)
    if z.shape != (n,):
        raise DataError(f"exogenous regressor must have length {n}")
    return z


def _path(x: np.ndarray, tau: np.ndarray, xi: np.ndarray) -> MeanPath:
    mu = tau * xi
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = x / mu
    return MeanPath(mu=mu, tau=tau, xi=xi, residuals=resid)


def filter_amem(
    series: PanelSeries,
    short: ShortRunParams,
    level: float | None = None,
    mu0: float | None = None,
    z=None,
) -> MeanPath:
    """Asymmetric MEM with intercept ``(1 - alpha1 - gamma1/2 - beta1) * level``.

    ``level`` defaults to the sample mean of ``rvol`` and ``mu0`` to ``level``.
    The returned ``tau`` is the constant level and ``xi = mu / level``.
    """
    short.check()
    x = series.rvol
    level = float(np.mean(x)) if level is None else float(level)
    if not level > 0:
        raise DataError("AMEM level must be positive")
    mu0 = level if mu0 is None else float(mu0)
    xi = _xi_recursion(
        x / level, series.neg, _z_array(z, len(x)),
        short.alpha1, short.gamma1, short.beta1, short.delta1 / level, mu0 / level,
    )
    tau = np.full(len(x), level)
    return _path(x, tau, xi)


def filter_component(
    series: PanelSeries,
    short: ShortRunParams,
    long: LongRunComponentParams,
    tau0: float | None = None,
    xi0: float = 1.0,
    z=None,
) -> MeanPath:
    """Joint short-run / long-run daily recursion of the Component-MEM.

    ``xi`` is driven by lagged ``x / tau`` and ``tau`` by lagged ``x / xi``;
    each has its own asymmetric loading gated on the lagged return sign.
    ``tau0`` defaults to the sample mean of ``rvol``.
    """
    short.check()
    long.check()
    x = series.rvol
    tau0 = float(np.mean(x)) if tau0 is None else float(tau0)
    xi, tau = _component_recursion(
        x, series.neg, _z_array(z, len(x)),
        short.alpha1, short.gamma1, short.beta1, short.delta1,
        long.omega_tau, long.alpha1_tau, long.gamma1_tau, long.beta1_tau,
        float(xi0), tau0,
    )
    if np.any(tau <= 0):
        raise ConstraintError("long-run component became nonpositive during filtering")
    return _path(x, tau, xi)


def midas_tau(long: MidasLongRunParams, lags) -> np.ndarray | float:
    """``exp(m + zeta * sum_k delta_k X_{t-k})`` for one lag row or a lag matrix."""
    lags = np.asarray(lags, dtype=float)
    if lags.shape[-1] != long.lag.K:
        raise DataError(f"expected {long.lag.K} lags, got {lags.shape[-1]}")
    s = lags @ beta_weights(long.lag.K, long.lag.omega1, long.lag.omega2)
    out = np.exp(long.m + long.zeta * s)
    return float(out) if out.ndim == 0 else out


def filter_mem_midas(
    series: PanelSeries,
    short: ShortRunParams,
    long: MidasLongRunParams,
    xi0: float = 1.0,
    z=None,
) -> MeanPath:
    """MEM-MIDAS: period-constant ``tau_t`` from beta-weighted macro lags."""
    short.check()
    lags = series.macro_lags(long.lag.K)
    _, codes = series.period_codes()
    tau = np.asarray(midas_tau(long, lags))[codes]
    x = series.rvol
    xi = _xi_recursion(
        x / tau, series.neg, _z_array(z, len(x)),
        short.alpha1, short.gamma1, short.beta1, short.delta1, float(xi0),
    )
    return _path(x, tau, xi)


def forecast_one_step(
    model: str,
    params: ModelParams,
    state: FilterState,
    next_lags=None,
    next_period: int | None = None,
) -> float:
    """``E(x_{i+1} | F_i) = tau_{i+1} * xi_{i+1}`` from last-day state.

    For MEM-MIDAS pass ``next_lags`` (``X_{t-1}..X_{t-K}`` of the forecast
    day's period) when that period differs from the state's; otherwise the
    state's ``tau`` is kept.
    """
    if state is None:
        raise DataError("missing filter state")
    model = model.lower()
    short = params.short
    if model == "amem":
        level = params.level if params.level is not None else state.tau
        xi = xi_step(short, state.x / level, state.neg, state.xi, state.z / level)
        return level * xi
    if model in ("cmem", "component-mem", "component"):
        long = params.long
        xi = xi_step(short, state.x / state.tau, state.neg, state.xi, state.z)
        a = long.alpha1_tau + (long.gamma1_tau if state.neg else 0.0)
        tau = long.omega_tau + a * state.x / state.xi + long.beta1_tau * state.tau
        return tau * xi
    if model in ("mem-midas", "midas"):
        new_period = next_period is not None and next_period != state.period
        if next_lags is not None and (new_period or next_period is None):
            tau_next = midas_tau(params.long, next_lags)
        elif new_period:
            raise DataError("period changes: next_lags required for MEM-MIDAS forecast")
        else:
            tau_next = state.tau
        xi = xi_step(short, state.x / state.tau, state.neg, state.xi, state.z)
        return tau_next * xi
    raise ValueError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------
def xi_second_moment(short: ShortRunParams, sigma2: float) -> float:
    """``E(xi^2)`` of the short-run factor for unit-mean errors of variance ``sigma2``.

    Assumes the sign indicator is a fair coin independent of the error; the
    exogenous regressor contribution is excluded.
    """
    a, g, b = short.alpha1, short.gamma1, short.beta1
    bstar = short.persistence
    denom = 1.0 - ((sigma2 + 1.0) * ((bstar - b) ** 2 + g * g / 4.0) + b * (2.0 * bstar - b))
    if not denom > 0:
        raise MomentError("second moment does not exist")
    return (1.0 - bstar**2) / denom


def component_stationarity(
    short: ShortRunParams,
    long: LongRunComponentParams,
    mu: float,
    sigma2: float,
) -> tuple[float, float]:
    """Mean of the long-run factor and the ``omega_tau`` implied by mean ``mu``.

    Returns ``(E(tau), omega_tau)`` with
    ``E(tau) = mu * (1 - D / (1 - p_xi * p_tau))`` and
    ``omega_tau = (1 - p_tau) * E(tau)``, where ``p`` are persistences and
    ``D = sigma2 (a + g/2)(a_tau + g_tau/2) + (sigma2 + 1) g g_tau / 4``.
    """
    p_xi, p_tau = short.persistence, long.persistence
    if p_xi * p_tau >= 1:
        raise MomentError("persistence product must be < 1 for mean stationarity")
    d = (
        sigma2 * (short.alpha1 + short.gamma1 / 2) * (long.alpha1_tau + long.gamma1_tau / 2)
        + (sigma2 + 1.0) * short.gamma1 * long.gamma1_tau / 4.0
    )
    e_tau = mu * (1.0 - d / (1.0 - p_xi * p_tau))
    nonneg = min(short.alpha1, short.gamma1, short.beta1,
                 long.alpha1_tau, long.gamma1_tau, long.beta1_tau) >= 0
    if nonneg and e_tau > mu * (1 + 1e-12):
        raise MomentError("E(tau) exceeds mu with nonnegative parameters")
    return e_tau, (1.0 - p_tau) * e_tau


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GammaErrors:
    """``Gamma(phi, phi)``: unit mean, variance ``1 / phi``."""

    phi: float

    def __post_init__(self):
        if not (math.isfinite(self.phi) and self.phi > 0):
            raise ValueError("Gamma shape phi must be positive")

    @property
    def variance(self) -> float:
        return 1.0 / self.phi

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.gamma(self.phi, 1.0 / self.phi, size=n)


@dataclass(frozen=True)
class LogNormalErrors:
    """``LogNormal(-V/2, V)``: unit mean, variance ``exp(V) - 1``."""

    V: float

    def __post_init__(self):
        if not (math.isfinite(self.V) and self.V >= 0):
            raise ValueError("log-normal variance V must be >= 0")

    @property
    def variance(self) -> float:
        return math.expm1(self.V)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.exp(-self.V / 2 + math.sqrt(self.V) * rng.standard_normal(n))


def _business_days(n: int, start: str) -> np.ndarray:
    # numpy calendar arithmetic has no nanosecond span limit
    return np.busday_offset(np.datetime64(start, "D"), np.arange(n), roll="forward")


def simulate_macro(n_periods: int, rng: np.random.Generator, rho: float = 0.8, scale: float = 1.0) -> np.ndarray:
    """Stationary Gaussian AR(1) draws used as a synthetic low-frequency driver."""
    x = np.empty(n_periods)
    sd0 = scale / math.sqrt(1 - rho * rho)
    x[0] = sd0 * rng.standard_normal()
    e = scale * rng.standard_normal(n_periods)
    for t in range(1, n_periods):
        x[t] = rho * x[t - 1] + e[t]
    return x


def simulate(
    model: str,
    params: ModelParams,
    error_dist: GammaErrors | LogNormalErrors,
    horizon: int,
    seed: int | np.random.Generator | None = None,
    *,
    frequency: str = "M",
    start: str = "2000-01-03",
    macro: MacroSeries | np.ndarray | None = None,
    burn_in: int = 0,
    tau0: float | None = None,
) -> PanelSeries:
    """Simulate a panel from one of the three MEM-type models.

    Return signs are fair coins independent of the errors; the return is
    ``x * eta`` with ``eta`` standard normal.  The simulated truth is stored
    in ``series.meta``: ``eps``, ``path`` (a :class:`MeanPath`), and the
    first-day state ``xi0``/``tau0``/``level`` needed to filter the series
    back exactly.
    """
    if not isinstance(error_dist, (GammaErrors, LogNormalErrors)):
        raise ValueError("error_dist must be GammaErrors or LogNormalErrors")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model = model.lower()
    short = params.short
    short.check()
    n = horizon + burn_in
    eps = error_dist.draw(rng, n)
    eta = rng.standard_normal(n)
    neg = (eta < 0).astype(float)
    z = np.zeros(n)
    meta: dict = {}

    if model == "amem":
        level = 1.0 if params.level is None else float(params.level)
        tau = np.full(n, level)
        xi, x = _simulate_xi(tau, eps, neg, z, short.alpha1, short.gamma1, short.beta1, 0.0, 1.0)
        meta["level"] = level
        dates = _business_days(horizon, start)
        series = PanelSeries(dates, x[burn_in:] * eta[burn_in:], x[burn_in:])
        series = assign_periods(series, frequency)
    elif model in ("cmem", "component-mem", "component"):
        long = params.long
        long.check()
        if tau0 is None:
            tau0 = long.omega_tau / (1.0 - long.persistence)
        xi, tau, x = _simulate_component(
            eps, neg, z, short.alpha1, short.gamma1, short.beta1, 0.0,
            long.omega_tau, long.alpha1_tau, long.gamma1_tau, long.beta1_tau, 1.0, float(tau0),
        )
        dates = _business_days(horizon, start)
        series = assign_periods(PanelSeries(dates, x[burn_in:] * eta[burn_in:], x[burn_in:]), frequency)
    elif model in ("mem-midas", "midas"):
        if burn_in:
            raise ValueError("burn_in is not supported for MEM-MIDAS; xi starts at its mean")
        long = params.long
        K = long.lag.K
        dates = _business_days(horizon, start)
        series = assign_periods(PanelSeries(dates, np.zeros(n), np.zeros(n)), frequency)
        uniq, codes = series.period_codes()
        if macro is None:
            values = simulate_macro(uniq.size + K, rng)
            macro = MacroSeries(series.freq, np.arange(uniq[0] - K, uniq[-1] + 1), values)
        elif not isinstance(macro, MacroSeries):
            values = np.asarray(macro, dtype=float)
            if values.size < uniq.size + K:
                raise DataError("macro array too short for horizon and K lags")
            values = values[: uniq.size + K]
            macro = MacroSeries(series.freq, np.arange(uniq[0] - K, uniq[-1] + 1), values)
        series = PanelSeries(
            series.dates, series.ret, series.rvol, series.freq, series.period,
            series.day_in_period, macro,
        )
        tau_p = np.asarray(midas_tau(long, series.macro_lags(K)))
        tau = tau_p[codes]
        xi, x = _simulate_xi(tau, eps, neg, z, short.alpha1, short.gamma1, short.beta1, 0.0, 1.0)
        series = series.with_values(ret=x * eta, rvol=x)
    else:
        raise ValueError(f"unknown model {model!r}")

    if model == "amem":
        tau = np.full(n, meta["level"])
    sl = slice(burn_in, None)
    path = MeanPath(mu=tau[sl] * xi[sl], tau=tau[sl], xi=xi[sl], residuals=eps[sl])
    meta.update(eps=eps[sl].copy(), path=path, xi0=float(xi[burn_in]), tau0=float(tau[burn_in]),
                model=model, params=params, error_dist=error_dist)
    series.meta.update(meta)
    return series
