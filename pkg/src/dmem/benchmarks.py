"""
Benchmark volatility models: asymmetric HAR, GJR-GARCH, GARCH-MIDAS and its
sign-split variant, and Realized GARCH.

GARCH-type models are fitted by Gaussian (quasi) maximum likelihood on
returns demeaned by the estimation-window mean; their variance forecasts are
converted to volatility by a square root so that they share the scale of the
realized-volatility target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import optimize

from dmem.exceptions import ConstraintError, ConvergenceError, DataError, IdentificationError
from dmem.inference import FitResult, _fd_jacobian, _ljung_box_pvalues
from dmem.mem import _xi_recursion
from dmem.midas import OMEGA2_LOWER, BetaLag, beta_weights
from dmem.params import ParamSpace, Slot
from dmem.timeseries import PanelSeries

logger = logging.getLogger(__name__)

__all__ = [
    "BENCHMARKS",
    "AharModel",
    "AharParams",
    "GjrParams",
    "GmDagmParams",
    "RgarchParams",
    "ahar_design",
    "filter_gjr",
    "filter_gm_dagm",
    "filter_rgarch",
    "fit_ahar",
    "fit_benchmark",
    "fit_garch_family",
    "simulate_ahar",
    "simulate_gjr",
    "variance_to_vol_forecast",
]

BENCHMARKS = ("ahar", "gjr", "gm", "dagm", "rgarch")
LOG_2PI = math.log(2 * math.pi)
AHAR_FLOOR = 1e-4


def variance_to_vol_forecast(h):
    """Square root of a variance forecast; rejects negative input."""
    a = np.asarray(h, dtype=float)
    if np.any(a < 0) or np.any(np.isnan(a)):
        raise DataError("variance forecasts must be nonnegative")
    out = np.sqrt(a)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class AharParams:
    c: float
    beta1: float
    gamma1: float
    beta5: float
    beta22: float
    sigma_u2: float = 1.0

    def __post_init__(self):
        if not self.sigma_u2 > 0:
            raise ConstraintError("sigma_u2 must be > 0")


@dataclass(frozen=True)
class GjrParams:
    const: float
    alpha1: float
    gamma1: float
    beta1: float

    def check(self) -> None:
        bad = []
        if not self.const > 0:
            bad.append("const must be > 0")
        if self.alpha1 < 0 or self.beta1 < 0:
            bad.append("alpha1 and beta1 must be >= 0")
        if self.alpha1 + self.gamma1 < 0:
            bad.append("alpha1 + gamma1 must be >= 0")
        if self.alpha1 + self.gamma1 / 2 + self.beta1 >= 1:
            bad.append("alpha1 + gamma1/2 + beta1 must be < 1")
        if bad:
            raise ConstraintError("; ".join(bad))


@dataclass(frozen=True)
class GmDagmParams:
    """GARCH-MIDAS (``zeta``/``lag``) or its sign-split version (``*_plus``/``*_minus``)."""

    alpha1: float
    gamma1: float
    beta1: float
    m: float
    zeta: float | None = None
    lag: BetaLag | None = None
    zeta_plus: float | None = None
    lag_plus: BetaLag | None = None
    zeta_minus: float | None = None
    lag_minus: BetaLag | None = None

    @property
    def is_dagm(self) -> bool:
        return self.zeta_plus is not None

    @property
    def K(self) -> int:
        return self.lag_plus.K if self.is_dagm else self.lag.K

    def check(self) -> None:
        if self.alpha1 < 0 or self.beta1 < 0 or self.alpha1 + self.gamma1 < 0:
            raise ConstraintError("alpha1, beta1 and alpha1 + gamma1 must be >= 0")
        if self.alpha1 + self.gamma1 / 2 + self.beta1 >= 1:
            raise ConstraintError("alpha1 + gamma1/2 + beta1 must be < 1")
        if self.is_dagm:
            if None in (self.lag_plus, self.zeta_minus, self.lag_minus):
                raise ConstraintError("DAGM needs zeta_plus, lag_plus, zeta_minus and lag_minus")
            if self.lag_plus.K != self.lag_minus.K:
                raise ConstraintError("DAGM lag polynomials must share K")
        elif self.zeta is None or self.lag is None:
            raise ConstraintError("GM needs zeta and lag")


@dataclass(frozen=True)
class RgarchParams:
    const: float
    beta1: float
    alpha1: float
    xi_m: float
    phi_m: float
    tau1: float
    tau2: float
    sigma_u2: float

    def check(self) -> None:
        if not self.sigma_u2 > 0:
            raise ConstraintError("sigma_u2 must be > 0")
        if abs(self.beta1) >= 1:
            raise ConstraintError("|beta1| must be < 1")


# ---------------------------------------------------------------------------
# AHAR
# ---------------------------------------------------------------------------
def ahar_design(series: PanelSeries) -> tuple[np.ndarray, np.ndarray]:
    """Regressor rows for every day with 22 predecessors.

    Columns: constant, ``x_{i-1}``, ``x_{i-1} * 1(r_{i-1} < 0)``, mean of
    ``x_{i-5..i-2}``, mean of ``x_{i-22..i-6}``.  Returns ``(X, rows)`` where
    ``rows`` indexes the days covered.
    """
    x = np.asarray(series.rvol, dtype=float)
    n = x.size
    if n < 23:
        raise DataError("AHAR needs at least 23 observations")
    cs = np.r_[0.0, np.cumsum(x)]
    rows = np.arange(22, n)
    X = np.column_stack([
        np.ones(rows.size),
        x[rows - 1],
        x[rows - 1] * series.neg[rows - 1],
        (cs[rows - 1] - cs[rows - 5]) / 4.0,
        (cs[rows - 5] - cs[rows - 22]) / 17.0,
    ])
    return X, rows


class AharModel:
    id = "ahar"
    names = ["c", "beta1", "gamma1", "beta5", "beta22"]

    def vol_path(self, series: PanelSeries, theta, init=None) -> np.ndarray:
        """Fitted values floored at a small positive constant; NaN for the first 22 days."""
        X, rows = ahar_design(series)
        out = np.full(len(series), np.nan)
        out[rows] = np.maximum(X @ np.asarray(theta, dtype=float), AHAR_FLOOR)
        return out


def fit_ahar(series: PanelSeries) -> FitResult:
    """OLS with heteroskedasticity-robust (HC0) standard errors."""
    X, rows = ahar_design(series)
    y = np.asarray(series.rvol, dtype=float)[rows]
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise DataError(f"AHAR regressor matrix is rank-deficient (rank {rank} < {X.shape[1]})")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    n = y.size
    XtX_inv = np.linalg.inv(X.T @ X)
    meat = (X * resid[:, None] ** 2).T @ X
    hc0 = XtX_inv @ meat @ XtX_inv
    classical = XtX_inv * float(resid @ resid) / (n - X.shape[1])
    s2 = float(np.mean(resid**2))
    model = AharModel()
    std = resid / math.sqrt(s2) if s2 > 0 else resid
    return FitResult(
        model="ahar",
        estimator="ols",
        names=list(model.names),
        theta=beta,
        stderr={"robust": np.sqrt(np.diag(hc0)), "sandwich": np.sqrt(np.diag(hc0)),
                "ols": np.sqrt(np.diag(classical))},
        loglik=float(-0.5 * n * (LOG_2PI + math.log(s2) + 1)) if s2 > 0 else None,
        nobs=n,
        diagnostics={"ljung_box": _ljung_box_pvalues(std)},
        convergence={"converged": True, "identified": True},
        extra={"sigma_u2": s2, "r2": 1 - s2 / float(np.var(y)) if np.var(y) > 0 else float("nan")},
        spec=model,
    )


def simulate_ahar(params: AharParams, n: int, seed=None, start: str = "2000-01-03",
                  frequency: str = "M") -> PanelSeries:
    """Simulate AHAR data; volatility is clipped at ``AHAR_FLOOR``."""
    from dmem.mem import _business_days
    from dmem.timeseries import assign_periods

    rng = np.random.default_rng(seed)
    burn = 200
    m = n + burn
    u = rng.normal(0, math.sqrt(params.sigma_u2), m)
    eta = rng.standard_normal(m)
    neg = eta < 0
    den = 1 - params.beta1 - params.gamma1 / 2 - params.beta5 - params.beta22
    x = np.full(m, params.c / den if den > 0 else params.c)
    for i in range(22, m):
        x[i] = (params.c + (params.beta1 + params.gamma1 * neg[i - 1]) * x[i - 1]
                + params.beta5 * x[i - 5:i - 1].mean() + params.beta22 * x[i - 22:i - 5].mean() + u[i])
        x[i] = max(x[i], AHAR_FLOOR)
    x, eta = x[burn:], eta[burn:]
    series = PanelSeries(_business_days(n, start), x * eta, x)
    return assign_periods(series, frequency)


# ---------------------------------------------------------------------------
# GARCH-type recursions
# ---------------------------------------------------------------------------
@numba.njit(cache=True)
def _gjr_recursion(r, c, a, g, b, h1):  # pragma: no cover - jitted
    n = r.shape[0]
    h = np.empty(n)
    if n == 0:
        return h
    h[0] = h1
    for i in range(1, n):
        lev = g if r[i - 1] < 0 else 0.0
        h[i] = c + (a + lev) * r[i - 1] * r[i - 1] + b * h[i - 1]
    return h


@numba.njit(cache=True)
def _rgarch_recursion(logx, c, b, a, logh1):  # pragma: no cover - jitted
    n = logx.shape[0]
    lh = np.empty(n)
    if n == 0:
        return lh
    lh[0] = logh1
    for i in range(1, n):
        lh[i] = c + b * lh[i - 1] + a * logx[i - 1]
    return lh


def _returns(series, mean: float | None):
    r = np.asarray(series.ret if isinstance(series, PanelSeries) else series, dtype=float)
    return r - (float(np.mean(r)) if mean is None else mean)


def filter_gjr(series, params: GjrParams, h1: float | None = None, mean: float | None = 0.0) -> np.ndarray:
    """GJR conditional variance path.

    ``series`` is a :class:`PanelSeries` or a return array; returns are
    shifted by ``mean`` (``None`` uses the sample mean).  ``h1`` defaults to
    the sample variance of the shifted returns.
    """
    params.check()
    r = _returns(series, mean)
    h1 = float(np.mean(r**2)) if h1 is None else float(h1)
    return _gjr_recursion(np.ascontiguousarray(r), params.const, params.alpha1, params.gamma1, params.beta1, h1)


def gm_dagm_tau(params: GmDagmParams, lags: np.ndarray) -> np.ndarray:
    """Per-period long-run variance ``tau_t``; ``lags`` is ``(T, K)``, most recent first."""
    lags = np.asarray(lags, dtype=float)
    if params.is_dagm:
        pos = np.where(lags >= 0, lags, 0.0)
        neg = np.where(lags < 0, lags, 0.0)
        arg = params.m + params.zeta_plus * (pos @ params.lag_plus.weights()) \
            + params.zeta_minus * (neg @ params.lag_minus.weights())
    else:
        arg = params.m + params.zeta * (lags @ params.lag.weights())
    return np.exp(arg)


def filter_gm_dagm(series: PanelSeries, params: GmDagmParams, mean: float | None = 0.0,
                   xi0: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(tau, xi, h)`` daily paths with ``h = tau * xi``.

    The short-run recursion is the MEM-MIDAS one with ``r**2 / tau`` as driver.
    """
    params.check()
    lags = series.macro_lags(params.K)
    _, codes = series.period_codes()
    tau = gm_dagm_tau(params, lags)[codes]
    r = _returns(series, mean)
    xi = _xi_recursion(r * r / tau, (r < 0).astype(float), np.zeros(r.size),
                       params.alpha1, params.gamma1, params.beta1, 0.0, xi0)
    return tau, xi, tau * xi


def filter_rgarch(series: PanelSeries, params: RgarchParams, logh1: float | None = None,
                  mean: float | None = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(h, eta, u)``: variance, standardized returns and measurement errors."""
    params.check()
    x = np.asarray(series.rvol, dtype=float)
    if np.any(x <= 0):
        raise DataError("Realized GARCH needs strictly positive realized volatility")
    r = _returns(series, mean)
    lx = np.log(x)
    logh1 = math.log(float(np.mean(r**2))) if logh1 is None else float(logh1)
    lh = _rgarch_recursion(lx, params.const, params.beta1, params.alpha1, logh1)
    h = np.exp(lh)
    eta = r / np.sqrt(h)
    u = lx - params.xi_m - params.phi_m * lh - params.tau1 * eta - params.tau2 * (eta * eta - 1)
    return h, eta, u


def simulate_gjr(params: GjrParams, n: int, seed=None, start: str = "2000-01-03",
                 frequency: str = "M") -> PanelSeries:
    """Gaussian GJR returns; ``rvol`` is set to ``sqrt(h)``."""
    from dmem.mem import _business_days
    from dmem.timeseries import assign_periods

    params.check()
    rng = np.random.default_rng(seed)
    burn = 500
    z = rng.standard_normal(n + burn)
    h = params.const / (1 - params.alpha1 - params.gamma1 / 2 - params.beta1)
    r = np.empty(n + burn)
    hs = np.empty(n + burn)
    for i in range(n + burn):
        hs[i] = h
        r[i] = math.sqrt(h) * z[i]
        h = params.const + (params.alpha1 + (params.gamma1 if r[i] < 0 else 0.0)) * r[i] ** 2 + params.beta1 * h
    series = PanelSeries(_business_days(n, start), r[burn:], np.sqrt(hs[burn:]))
    return assign_periods(series, frequency)


# ---------------------------------------------------------------------------
# Gaussian likelihood models
# ---------------------------------------------------------------------------
def _simplex3():
    return [
        Slot("alpha1", "simplex", group="g", weight=1.0),
        Slot("gamma1", "simplex", group="g", weight=0.5),
        Slot("beta1", "simplex", group="g", weight=1.0),
    ]


class _GaussianModel:
    id = ""
    space: ParamSpace

    @property
    def names(self) -> list[str]:
        return self.space.names

    def init_stats(self, series: PanelSeries) -> dict:
        r = np.asarray(series.ret, dtype=float)
        mean = float(np.mean(r))
        return {"mean": mean, "h1": float(np.mean((r - mean) ** 2))}

    def variance(self, series, theta, init) -> np.ndarray:
        raise NotImplementedError

    def loglik_obs(self, series, theta, init) -> np.ndarray:
        h = self.variance(series, theta, init)
        r = np.asarray(series.ret, dtype=float) - init["mean"]
        return -0.5 * (LOG_2PI + np.log(h) + r * r / h)

    def std_resid_sq(self, series, theta, init) -> np.ndarray:
        r = np.asarray(series.ret, dtype=float) - init["mean"]
        return r * r / self.variance(series, theta, init)

    def vol_path(self, series, theta, init) -> np.ndarray:
        return variance_to_vol_forecast(self.variance(series, theta, init))


class GjrModel(_GaussianModel):
    id = "gjr"
    space = ParamSpace.build([Slot("const", "positive")] + _simplex3())

    def theta0(self, series, init):
        return np.array([0.025 * init["h1"], 0.05, 0.05, 0.9])

    def params(self, theta):
        return GjrParams(*map(float, theta))

    def variance(self, series, theta, init):
        return filter_gjr(series, self.params(theta), h1=init["h1"], mean=init["mean"])


class GmModel(_GaussianModel):
    """GARCH-MIDAS; ``dagm=True`` splits the MIDAS term by the sign of the lags."""

    def __init__(self, K: int = 36, dagm: bool = False):
        self.K = int(K)
        self.dagm = bool(dagm)
        self.id = "dagm" if dagm else "gm"
        tail = (
            [Slot("zeta_plus"), Slot("omega2_plus", "lower", lower=OMEGA2_LOWER),
             Slot("zeta_minus"), Slot("omega2_minus", "lower", lower=OMEGA2_LOWER)]
            if dagm else [Slot("zeta"), Slot("omega2", "lower", lower=OMEGA2_LOWER)]
        )
        self.space = ParamSpace.build(_simplex3() + [Slot("m")] + tail)

    def theta0(self, series, init):
        head = [0.05, 0.05, 0.9, math.log(init["h1"])]
        return np.array(head + ([0.0, 2.0, 0.0, 2.0] if self.dagm else [0.0, 2.0]))

    def params(self, theta):
        t = list(map(float, theta))
        if self.dagm:
            return GmDagmParams(*t[:4], zeta_plus=t[4], lag_plus=BetaLag(self.K, 1.0, t[5]),
                                zeta_minus=t[6], lag_minus=BetaLag(self.K, 1.0, t[7]))
        return GmDagmParams(*t[:4], zeta=t[4], lag=BetaLag(self.K, 1.0, t[5]))

    def variance(self, series, theta, init):
        return filter_gm_dagm(series, self.params(theta), mean=init["mean"])[2]


class RgarchModel(_GaussianModel):
    id = "rgarch"
    space = ParamSpace.build([
        Slot("const"), Slot("beta1", "interval", lower=-1.0, upper=1.0), Slot("alpha1"),
        Slot("xi_m"), Slot("phi_m"), Slot("tau1"), Slot("tau2"), Slot("sigma_u2", "positive"),
    ])

    def theta0(self, series, init):
        lh = math.log(init["h1"])
        lx = float(np.mean(np.log(series.rvol)))
        b, a = 0.55, 0.8
        return np.array([(1 - b) * lh - a * lx, b, a, lx - 0.5 * lh, 0.5, 0.0, 0.0, 0.1])

    def params(self, theta):
        return RgarchParams(*map(float, theta))

    def variance(self, series, theta, init):
        return filter_rgarch(series, self.params(theta), logh1=math.log(init["h1"]), mean=init["mean"])[0]

    def loglik_obs(self, series, theta, init):
        p = self.params(theta)
        h, eta, u = filter_rgarch(series, p, logh1=math.log(init["h1"]), mean=init["mean"])
        ret_part = -0.5 * (LOG_2PI + np.log(h) + eta * eta)
        meas_part = -0.5 * (LOG_2PI + math.log(p.sigma_u2) + u * u / p.sigma_u2)
        return ret_part + meas_part


def _garch_model(model_id: str, K: int = 36) -> _GaussianModel:
    key = model_id.lower()
    if key == "gjr":
        return GjrModel()
    if key == "gm":
        return GmModel(K)
    if key == "dagm":
        return GmModel(K, dagm=True)
    if key == "rgarch":
        return RgarchModel()
    raise ValueError(f"unknown GARCH-family model {model_id!r}")


def _central_grad(f, theta, feasible, rel=1e-6, floor=1e-8):
    _, J, _ = _fd_jacobian(lambda t: np.atleast_1d(f(t)), theta, rel, floor, feasible)
    return J[0]


def _qml_cov(model, series, theta, init):
    """OPG, Hessian and sandwich covariance matrices of ``theta_hat``."""
    feas = model.space.is_feasible
    _, S, _ = _fd_jacobian(lambda t: model.loglik_obs(series, t, init), theta, 1e-6, 1e-8, feas)
    n = S.shape[0]
    Iobs = S.T @ S / n

    def mean_score(t):
        return _central_grad(lambda s: float(np.mean(model.loglik_obs(series, s, init))), t, feas)

    _, H, _ = _fd_jacobian(mean_score, theta, 1e-4, 1e-5, feas)
    H = 0.5 * (H + H.T)
    try:
        Hi = np.linalg.inv(H)
        Ii = np.linalg.inv(Iobs)
    except np.linalg.LinAlgError as exc:
        raise IdentificationError(f"{model.id}: singular information matrix") from exc
    return {"opg": Ii / n, "hessian": -Hi / n, "sandwich": Hi @ Iobs @ Hi / n}, float(np.linalg.norm(S.mean(0)))


def fit_garch_family(series: PanelSeries, model_id: str, theta0=None, *, K: int = 36,
                     maxiter: int = 1000, init: dict | None = None) -> FitResult:
    """Gaussian (quasi) maximum likelihood for ``gjr``, ``gm``, ``dagm`` or ``rgarch``.

    Returns are demeaned by the sample mean of ``series`` (stored in
    ``init``); the first variance is the sample variance.  Standard errors
    are sandwich (QML) with OPG and Hessian versions alongside.
    """
    model = _garch_model(model_id, K)
    init = dict(init or model.init_stats(series))
    theta0 = model.theta0(series, init) if theta0 is None else np.asarray(theta0, dtype=float)
    model.space.check(theta0)
    space = model.space

    def obj(u):
        with np.errstate(all="ignore"):
            v = -float(np.mean(model.loglik_obs(series, space.from_free(u), init)))
        return v if math.isfinite(v) else 1e300

    def grad(u):
        _, J, _ = _fd_jacobian(lambda w: np.array([obj(w)]), u, 1e-7, 1e-7)
        return J[0]

    res = optimize.minimize(obj, space.to_free(theta0), jac=grad, method="BFGS",
                            options={"gtol": 1e-7, "maxiter": maxiter})
    theta = space.from_free(res.x)
    gnorm = float(np.linalg.norm(grad(res.x)))
    trace = f"{res.message} after {res.nit} iterations; objective {res.fun:.8g}; |grad| {gnorm:.3g}"
    if not (res.success or gnorm < 1e-5) or not math.isfinite(res.fun) or res.fun >= 1e299:
        raise ConvergenceError(f"{model.id}: optimizer failed: {trace}", best=space.as_dict(theta), trace=trace)
    conv = {"converged": True, "optimizer": "BFGS", "message": str(res.message),
            "iterations": int(res.nit), "grad_norm": gnorm}
    try:
        covs, snorm = _qml_cov(model, series, theta, init)
        stderr = {k: np.sqrt(np.clip(np.diag(v), 0, None)) for k, v in covs.items()}
        conv.update(identified=True, score_norm=snorm)
    except IdentificationError as exc:
        nan = np.full(theta.size, np.nan)
        stderr = {"opg": nan, "hessian": nan.copy(), "sandwich": nan.copy()}
        conv.update(identified=False, identification=str(exc))
    loglik = float(np.sum(model.loglik_obs(series, theta, init)))
    extra = {"demeaned_by": init["mean"]}
    if isinstance(model, GmModel):
        extra["K"] = model.K
    return FitResult(
        model=model.id,
        estimator="gaussian_qml",
        names=model.names,
        theta=theta,
        stderr=stderr,
        loglik=loglik,
        nobs=len(series),
        diagnostics={"ljung_box": _ljung_box_pvalues(model.std_resid_sq(series, theta, init))},
        convergence=conv,
        init=init,
        extra=extra,
        spec=model,
    )


def fit_benchmark(series: PanelSeries, model_id: str, **kwargs) -> FitResult:
    """Fit any benchmark by id."""
    if model_id.lower() == "ahar":
        return fit_ahar(series)
    return fit_garch_family(series, model_id, **kwargs)
