"""
Estimation and inference for the DMEM family.

Three estimators share one moment structure.  With ``a = grad(log mu)`` the
per-observation gradient rows and ``eps = x / mu``:

* Gamma QML maximizes ``-mean(log mu + x / mu)``; its first-order condition is
  ``sum (eps - 1) a = 0`` whatever the Gamma shape.
* GMM solves the same moment conditions directly, so it tolerates zeros.
* Log-Normal ML solves ``sum (log eps + V/2) a = 0`` and alternates with an
  update of ``V``.

Gradient rows are obtained by central finite differences of the filtered
``log mu`` path, which lets a single code path serve every model, including
the MIDAS shape parameter.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize, special

from dmem.exceptions import (
    ConstraintError,
    ConvergenceError,
    DataError,
    IdentificationError,
)
from dmem.mem import (
    AmemParams,
    ComponentParams,
    LongRunComponentParams,
    MeanPath,
    MidasLongRunParams,
    MidasParams,
    ShortRunParams,
    _component_recursion,
    _xi_recursion,
    filter_amem,
    filter_component,
    filter_mem_midas,
)
from dmem.midas import OMEGA2_LOWER, BetaLag, beta_weights
from dmem.params import ParamSpace, Slot
from dmem.timeseries import PanelSeries

logger = logging.getLogger(__name__)

__all__ = [
    "AvarSet",
    "DmemModel",
    "FitResult",
    "ScorePieces",
    "avar_set",
    "block_avar",
    "fit_gmm",
    "fit_ml_gamma",
    "fit_ml_lognormal",
    "get_model",
    "gradient_a",
    "loglik_gamma",
    "loglik_lognormal",
    "phi_ml",
    "score",
    "score_gamma",
    "sigma2_gmm",
    "v_logvar",
    "v_ml",
    "v_mm",
]

LJUNG_BOX_LAGS = (5, 10, 20)


# ---------------------------------------------------------------------------
# model specifications
# ---------------------------------------------------------------------------
def _short_slots(suffix: str = "", group: str = "xi") -> list[Slot]:
    return [
        Slot(f"alpha1{suffix}", "simplex", group=group, weight=1.0),
        Slot(f"gamma1{suffix}", "simplex", group=group, weight=0.5),
        Slot(f"beta1{suffix}", "simplex", group=group, weight=1.0),
    ]


class DmemModel:
    """Parameter layout, initialization and fast filtering for one DMEM model.

    Subclasses define ``id``, ``space`` and the three hooks below.  ``init``
    holds quantities frozen from the estimation window (sample-mean level or
    starting ``tau``) so that a fitted model can be run forward on later data
    without looking at it.
    """

    id: str = ""
    space: ParamSpace
    # a parameter that rescales mu freely (no sample-mean targeting)
    free_scale: bool = False

    def init_stats(self, series: PanelSeries) -> dict:
        return {}

    def theta0(self, series: PanelSeries) -> np.ndarray:
        raise NotImplementedError

    def prepare(self, series: PanelSeries, init: dict | None = None) -> Callable[[np.ndarray], tuple]:
        """Return ``f(theta) -> (tau, xi)`` with inputs precomputed."""
        raise NotImplementedError

    def params(self, theta):
        raise NotImplementedError

    def filter(self, series: PanelSeries, theta, init: dict | None = None) -> MeanPath:
        raise NotImplementedError

    def vol_path(self, series: PanelSeries, theta, init: dict | None = None) -> np.ndarray:
        """One-step-ahead volatility forecasts (the filtered ``mu``)."""
        return self.filter(series, theta, init).mu

    @property
    def names(self) -> list[str]:
        return self.space.names

    def n_params(self) -> int:
        return len(self.space)

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class AmemModel(DmemModel):
    id = "amem"
    space = ParamSpace.build(_short_slots())

    def init_stats(self, series):
        level = float(np.mean(series.rvol))
        return {"level": level, "mu0": level}

    def theta0(self, series):
        return np.array([0.1, 0.05, 0.8])

    def prepare(self, series, init=None):
        init = init or self.init_stats(series)
        level, xi0 = init["level"], init["mu0"] / init["level"]
        driver = np.ascontiguousarray(series.rvol / level)
        neg, z = series.neg, np.zeros(len(series))
        tau = np.full(len(series), level)

        def f(theta):
            xi = _xi_recursion(driver, neg, z, theta[0], theta[1], theta[2], 0.0, xi0)
            return tau, xi

        return f

    def params(self, theta, init=None):
        return AmemParams(ShortRunParams(*map(float, theta[:3])), None if init is None else init["level"])

    def filter(self, series, theta, init=None):
        init = init or self.init_stats(series)
        return filter_amem(series, ShortRunParams(*map(float, theta[:3])), init["level"], init["mu0"])


class ComponentModel(DmemModel):
    id = "cmem"
    free_scale = True
    space = ParamSpace.build(
        _short_slots()
        + [Slot("omega_tau", "positive")]
        + _short_slots("_tau", group="tau")
    )

    def init_stats(self, series):
        return {"tau0": float(np.mean(series.rvol)), "xi0": 1.0}

    def theta0(self, series):
        return np.array([0.1, 0.05, 0.6, 0.04 * float(np.mean(series.rvol)), 0.05, 0.02, 0.9])

    def prepare(self, series, init=None):
        init = init or self.init_stats(series)
        x = np.ascontiguousarray(series.rvol)
        neg, z = series.neg, np.zeros(len(series))
        xi0, tau0 = float(init["xi0"]), float(init["tau0"])

        def f(theta):
            xi, tau = _component_recursion(
                x, neg, z, theta[0], theta[1], theta[2], 0.0,
                theta[3], theta[4], theta[5], theta[6], xi0, tau0,
            )
            return tau, xi

        return f

    def params(self, theta, init=None):
        t = list(map(float, theta))
        return ComponentParams(ShortRunParams(*t[:3]), LongRunComponentParams(*t[3:7]))

    def filter(self, series, theta, init=None):
        init = init or self.init_stats(series)
        p = self.params(theta)
        return filter_component(series, p.short, p.long, tau0=init["tau0"], xi0=init["xi0"])


class MidasModel(DmemModel):
    """MEM-MIDAS with ``omega1`` fixed at 1 and ``omega2`` estimated."""

    id = "mem-midas"
    free_scale = True
    space = ParamSpace.build(
        _short_slots()
        + [Slot("m"), Slot("zeta"), Slot("omega2", "lower", lower=OMEGA2_LOWER)]
    )

    def __init__(self, K: int = 36):
        self.K = int(K)

    def __repr__(self):
        return f"MidasModel(K={self.K})"

    def theta0(self, series):
        return np.array([0.1, 0.05, 0.8, math.log(float(np.mean(series.rvol))), 0.0, 2.0])

    def prepare(self, series, init=None):
        lags = np.ascontiguousarray(series.macro_lags(self.K))
        _, codes = series.period_codes()
        x = np.ascontiguousarray(series.rvol)
        neg, z = series.neg, np.zeros(len(series))
        K = self.K

        def f(theta):
            w = beta_weights(K, 1.0, theta[5])
            tau = np.exp(theta[3] + theta[4] * (lags @ w))[codes]
            xi = _xi_recursion(x / tau, neg, z, theta[0], theta[1], theta[2], 0.0, 1.0)
            return tau, xi

        return f

    def params(self, theta, init=None):
        t = list(map(float, theta))
        return MidasParams(ShortRunParams(*t[:3]), MidasLongRunParams(t[3], t[4], BetaLag(self.K, 1.0, t[5])))

    def filter(self, series, theta, init=None):
        p = self.params(theta)
        return filter_mem_midas(series, p.short, p.long)


def get_model(model, **kwargs) -> DmemModel:
    """Resolve a model id (or pass through a :class:`DmemModel`)."""
    if isinstance(model, DmemModel):
        return model
    key = str(model).lower()
    if key == "amem":
        return AmemModel()
    if key in ("cmem", "component-mem", "component"):
        return ComponentModel()
    if key in ("mem-midas", "midas", "memmidas"):
        return MidasModel(**kwargs)
    raise ValueError(f"unknown DMEM model {model!r}")


# ---------------------------------------------------------------------------
# score pieces
# ---------------------------------------------------------------------------
@dataclass
class ScorePieces:
    """Per-observation gradient rows ``a``, errors ``eps`` and ``b = d ln f / d eps``."""

    a: np.ndarray
    eps: np.ndarray
    b: np.ndarray | None = None

    @property
    def nobs(self) -> int:
        return self.a.shape[0]


def _logmu_fn(prep):
    def logmu(theta):
        tau, xi = prep(theta)
        return np.log(tau) + np.log(xi)

    return logmu


def _fd_jacobian(fn, theta, rel_step=1e-6, abs_floor=1e-8, feasible=None):
    """Central-difference Jacobian of a vector-valued ``fn`` at ``theta``.

    Falls back to a one-sided difference when a trial point is infeasible.
    Returns ``(f0, J, one_sided)`` with ``J`` of shape ``(len(f0), len(theta))``.
    """
    theta = np.asarray(theta, dtype=float)
    f0 = fn(theta)
    J = np.empty((f0.shape[0], theta.size))
    one_sided = []
    for j in range(theta.size):
        h = max(rel_step * abs(theta[j]), abs_floor)
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        ok_up = feasible is None or feasible(up)
        ok_dn = feasible is None or feasible(dn)
        if ok_up and ok_dn:
            J[:, j] = (fn(up) - fn(dn)) / (2 * h)
        elif ok_up:
            J[:, j] = (fn(up) - f0) / h
            one_sided.append(j)
        elif ok_dn:
            J[:, j] = (f0 - fn(dn)) / h
            one_sided.append(j)
        else:
            # shrink until one side fits
            for _ in range(40):
                h /= 2
                up[j] = theta[j] + h
                dn[j] = theta[j] - h
                if feasible(up):
                    J[:, j] = (fn(up) - f0) / h
                    break
                if feasible(dn):
                    J[:, j] = (f0 - fn(dn)) / h
                    break
            else:
                raise DataError(f"cannot difference parameter {j} inside the feasible region")
            one_sided.append(j)
    return f0, J, one_sided


def gradient_a(series: PanelSeries, model, theta, init: dict | None = None,
               rel_step: float = 1e-6, abs_floor: float = 1e-8) -> np.ndarray:
    """Rows ``a_{i,t} = grad_theta log mu_{i,t}`` by central differences.

    Parameters within one step of a bound are differenced one-sidedly; the
    offending columns are logged.
    """
    model = get_model(model)
    prep = model.prepare(series, init)
    _, J, one_sided = _fd_jacobian(
        _logmu_fn(prep), theta, rel_step, abs_floor, model.space.is_feasible
    )
    if one_sided:
        logger.info("one-sided differences for %s", [model.names[j] for j in one_sided])
    return J


def score_gamma(path: MeanPath | np.ndarray, a: np.ndarray) -> np.ndarray:
    """``N^-1 sum (eps - 1) a`` (the Gamma score without the ``phi`` factor)."""
    eps = path.residuals if isinstance(path, MeanPath) else np.asarray(path, dtype=float)
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return ((eps - 1.0)[:, None] * a).mean(axis=0)


def b_gamma(eps, phi):
    return (phi - 1.0) / eps - phi


def b_lognormal(eps, V):
    return -(1.5 + np.log(eps) / V) / eps


def score(pieces: ScorePieces) -> np.ndarray:
    """Assembled score ``-N^-1 sum (eps b + 1) a``."""
    if pieces.b is None:
        raise ValueError("score pieces carry no b")
    return -((pieces.eps * pieces.b + 1.0)[:, None] * pieces.a).mean(axis=0)


def loglik_gamma(x, mu, phi: float) -> float:
    """Average log-likelihood under ``Gamma(phi, phi)`` errors."""
    eps = x / mu
    lf = phi * math.log(phi) - special.gammaln(phi) + (phi - 1) * np.log(eps) - phi * eps
    return float(np.mean(lf - np.log(mu)))


def loglik_lognormal(x, mu, V: float) -> float:
    """Average log-likelihood under ``LogNormal(-V/2, V)`` errors."""
    u = np.log(x) - np.log(mu) + V / 2
    return float(np.mean(-0.5 * math.log(2 * math.pi * V) - u * u / (2 * V) - np.log(x)))


# ---------------------------------------------------------------------------
# shape estimators
# ---------------------------------------------------------------------------
def sigma2_gmm(residuals) -> float:
    """``N^-1 sum (eps - 1)^2``."""
    e = np.asarray(residuals, dtype=float)
    return float(np.mean((e - 1.0) ** 2))


def _positive_residuals(residuals, what):
    e = np.asarray(residuals, dtype=float)
    if np.any(e <= 0):
        raise DataError(f"{what} unfeasible with zeros")
    return e


def phi_ml(residuals, lo: float = 1e-4, hi: float = 1e6) -> float:
    """Maximum-likelihood Gamma shape given fitted residuals.

    Solves ``ln(phi) + 1 - digamma(phi) + mean(ln eps - eps) = 0``.
    """
    e = _positive_residuals(residuals, "phi_ml")
    c = 1.0 + float(np.mean(np.log(e) - e))

    def g(logphi):
        phi = math.exp(logphi)
        return math.log(phi) - special.digamma(phi) + c

    a, b = math.log(lo), math.log(hi)
    ga, gb = g(a), g(b)
    if ga * gb > 0:
        return lo if gb > 0 else hi
    return math.exp(optimize.brentq(g, a, b, xtol=1e-14, rtol=1e-14, maxiter=500))


def v_ml(residuals) -> float:
    """``2 (sqrt(mean(ln^2 eps) + 1) - 1)``, root of ``V^2/4 + V - mean(ln^2 eps)``."""
    e = _positive_residuals(residuals, "V_ML")
    m2 = float(np.mean(np.log(e) ** 2))
    return 2.0 * (math.sqrt(m2 + 1.0) - 1.0)


def v_mm(residuals) -> float:
    """Method-of-moments ``V = -2 mean(ln eps)``."""
    e = _positive_residuals(residuals, "V_MM")
    return -2.0 * float(np.mean(np.log(e)))


def v_logvar(residuals) -> float:
    """Sample variance of ``ln eps``."""
    e = _positive_residuals(residuals, "V")
    return float(np.var(np.log(e)))


_V_ESTIMATORS = {"mm": v_mm, "ml": v_ml, "logvar": v_logvar}


# ---------------------------------------------------------------------------
# asymptotic variances
# ---------------------------------------------------------------------------
@dataclass
class AvarSet:
    """OPG, Hessian and sandwich asymptotic variances of ``sqrt(N)(theta_hat - theta)``."""

    opg: np.ndarray
    hessian: np.ndarray
    sandwich: np.ndarray
    sigma2_hat: float
    shape_hat: float
    dist: str = "gamma"
    nobs: int = 0

    def stderr(self, kind: str = "sandwich") -> np.ndarray:
        m = getattr(self, kind)
        return np.sqrt(np.clip(np.diag(m), 0, None) / self.nobs)


def _safe_inv(M, names=None):
    M = 0.5 * (M + M.T)
    w, v = np.linalg.eigh(M)
    scale = max(abs(w).max(), 1e-300)
    if w.min() <= 1e-12 * scale:
        d = v[:, 0]
        if names is not None:
            desc = " + ".join(f"{c:.3g}*{n}" for c, n in zip(d, names) if abs(c) > 1e-3)
        else:
            desc = np.array2string(d, precision=3)
        raise IdentificationError(f"information matrix is singular along {desc}", direction=d)
    return v @ np.diag(1.0 / w) @ v.T


def block_avar(H: np.ndarray, I: np.ndarray, k: int) -> dict[str, np.ndarray]:
    """Variances of the first ``k`` parameters from joint Hessian and OPG.

    ``hessian = -(H11 - H12 H22^-1 H21)^-1`` and
    ``sandwich = A^-1 (I11 - B I21 - I12 B' + B I22 B') A^-1`` with
    ``A = H11 - H12 H22^-1 H21`` and ``B = H12 H22^-1``.
    """
    H11, H12, H21, H22 = H[:k, :k], H[:k, k:], H[k:, :k], H[k:, k:]
    I11, I12, I21, I22 = I[:k, :k], I[:k, k:], I[k:, :k], I[k:, k:]
    H22i = np.linalg.inv(H22)
    A = H11 - H12 @ H22i @ H21
    B = H12 @ H22i
    Ai = np.linalg.inv(A)
    sand = Ai @ (I11 - B @ I21 - I12 @ B.T + B @ I22 @ B.T) @ Ai
    opg = np.linalg.inv(I)[:k, :k]
    sym = lambda M: 0.5 * (M + M.T)  # noqa: E731
    return {"hessian": sym(-Ai), "sandwich": sym(sand), "opg": sym(opg)}


def avar_set(pieces: ScorePieces, dist: str = "gamma", shape: float | None = None,
             names=None) -> AvarSet:
    """Asymptotic variance matrices at the estimate.

    Gamma: ``I = phi^2 sigma^2 A`` and ``H = -phi A`` with ``A = mean(a a')``,
    giving ``phi^-2 sigma^-2 A^-1``, ``phi^-1 A^-1`` and ``sigma^2 A^-1``;
    ``shape`` defaults to ``1 / sigma^2`` where the three coincide.

    Log-normal: joint ``(theta, V)`` blocks; the Hessian version equals
    ``V (A - V/(V+2) a_bar a_bar')^-1``.
    """
    a, eps = np.atleast_2d(pieces.a.T).T, np.asarray(pieces.eps, dtype=float)
    n, k = a.shape
    Ahat = a.T @ a / n
    if dist == "gamma":
        s2 = sigma2_gmm(eps)
        phi = 1.0 / s2 if shape is None else float(shape)
        Ai = _safe_inv(Ahat, names)
        return AvarSet(
            opg=Ai / (phi * phi * s2),
            hessian=Ai / phi,
            sandwich=s2 * Ai,
            sigma2_hat=s2,
            shape_hat=phi,
            dist="gamma",
            nobs=n,
        )
    if dist == "lognormal":
        le = np.log(_positive_residuals(eps, "log-normal avar"))
        V = v_mm(eps) if shape is None else float(shape)
        if V == 0:
            z = np.zeros((k, k))
            return AvarSet(z, z.copy(), z.copy(), 0.0, 0.0, "lognormal", n)
        abar = a.mean(axis=0)
        H = -np.block([[Ahat, -abar[:, None] / 2], [-abar[None, :] / 2, np.array([[(V + 2) / (4 * V)]])]]) / V
        u = le + V / 2
        s_theta = (u / V)[:, None] * a
        s_V = -1 / (2 * V) - u / (2 * V) + u * u / (2 * V * V)
        S = np.column_stack([s_theta, s_V])
        I = S.T @ S / n
        _safe_inv(Ahat - V / (V + 2) * np.outer(abar, abar), names)
        out = block_avar(H, I, k)
        return AvarSet(
            opg=out["opg"], hessian=out["hessian"], sandwich=out["sandwich"],
            sigma2_hat=math.expm1(V), shape_hat=V, dist="lognormal", nobs=n,
        )
    raise ValueError(f"unknown distribution {dist!r}")


# ---------------------------------------------------------------------------
# fit result
# ---------------------------------------------------------------------------
@dataclass
class FitResult:
    """Estimates, standard errors, fitted path and diagnostics of one fit."""

    model: str
    estimator: str
    names: list[str]
    theta: np.ndarray
    stderr: dict[str, np.ndarray] = field(default_factory=dict)
    loglik: float | None = None
    criterion: float | None = None
    path: MeanPath | None = None
    nobs: int = 0
    diagnostics: dict = field(default_factory=dict)
    convergence: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    avar: AvarSet | None = None
    spec: object = field(default=None, repr=False)

    @property
    def params(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.theta)}

    def se(self, kind: str = "sandwich") -> dict[str, float]:
        s = self.stderr.get(kind)
        if s is None:
            return {n: float("nan") for n in self.names}
        return {n: float(v) for n, v in zip(self.names, s)}

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, (np.floating, float)):
                return None if not math.isfinite(float(v)) else float(v)
            if isinstance(v, (np.integer,)):
                return int(v)
            if isinstance(v, (np.bool_,)):
                return bool(v)
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return clean({
            "model": self.model,
            "estimator": self.estimator,
            "nobs": self.nobs,
            "params": self.params,
            "stderr": {k: dict(zip(self.names, np.asarray(v).tolist())) for k, v in self.stderr.items()},
            "loglik": self.loglik,
            "criterion": self.criterion,
            "diagnostics": self.diagnostics,
            "convergence": self.convergence,
            "init": self.init,
            "extra": {k: v for k, v in self.extra.items() if not isinstance(v, (MeanPath,))},
        })

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, **kw)


def _ljung_box_pvalues(resid) -> dict[int, float]:
    from dmem.evaluation import ljung_box

    out = {}
    resid = np.asarray(resid, dtype=float)
    for lag in LJUNG_BOX_LAGS:
        try:
            out[lag] = ljung_box(resid, lag)[1]
        except (DataError, ValueError):
            out[lag] = float("nan")
    return out


def _at_bound(space: ParamSpace, theta, tol=1e-6) -> list[str]:
    out = []
    for k, s in enumerate(space.slots):
        if s.kind == "simplex" and theta[k] < tol:
            out.append(s.name)
        elif s.kind == "lower" and theta[k] - s.lower < tol:
            out.append(s.name)
        elif s.kind == "positive" and theta[k] < tol:
            out.append(s.name)
    for g, idx in space._groups.items():
        total = sum(space.slots[k].weight * theta[k] for k in idx)
        if 1 - total < tol:
            out.append(f"persistence[{g}]")
    return out


def _check_theta0(model: DmemModel, theta0) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != (model.n_params(),):
        raise ValueError(f"theta0 must have {model.n_params()} entries for {model.id}")
    model.space.check(theta0)
    return theta0


class _Objective:
    """Gamma-QML objective and gradient on the unconstrained scale, with caching."""

    def __init__(self, model: DmemModel, series: PanelSeries, init: dict):
        self.model = model
        self.space = model.space
        self.x = np.asarray(series.rvol, dtype=float)
        self.prep = model.prepare(series, init)
        self.logmu_u = lambda u: _logmu_fn(self.prep)(self.space.from_free(u))
        self.nfev = 0

    def pieces_u(self, u):
        lm, J, _ = _fd_jacobian(self.logmu_u, u, rel_step=1e-6, abs_floor=1e-7)
        self.nfev += 1
        eps = self.x * np.exp(-lm)
        return lm, J, eps

    def value(self, u) -> float:
        lm = self.logmu_u(u)
        v = float(np.mean(lm + self.x * np.exp(-lm)))
        return v if math.isfinite(v) else 1e300

    def value_grad(self, u):
        lm, J, eps = self.pieces_u(u)
        v = float(np.mean(lm + eps))
        if not math.isfinite(v):
            return 1e300, np.zeros_like(u)
        g = ((1.0 - eps)[:, None] * J).mean(axis=0)
        return v, g

    def moments_u(self, u):
        _, J, eps = self.pieces_u(u)
        return ((eps - 1.0)[:, None] * J).mean(axis=0)


def _score_tol(theta) -> float:
    return 1e-6 * (1.0 + float(np.linalg.norm(theta)))


def _finalize_gamma(model, series, theta, init, estimator, phi=None, conv=None,
                    solve_phi=True, criterion=None) -> FitResult:
    theta = np.asarray(theta, dtype=float)
    path = model.filter(series, theta, init)
    a = gradient_a(series, model, theta, init)
    eps = path.residuals
    s = score_gamma(eps, a)
    conv = dict(conv or {})
    bound = _at_bound(model.space, theta)
    conv.update(
        score_norm=float(np.linalg.norm(s)),
        score_tol=_score_tol(theta),
        interior=not bound,
        at_bound=bound,
    )
    extra: dict = {"h12_gamma_norm": float(np.linalg.norm(s))}
    stderr, avar = {}, None
    try:
        avar = avar_set(ScorePieces(a, eps), "gamma", phi, names=model.names)
        stderr = {k: avar.stderr(k) for k in ("opg", "hessian", "sandwich")}
        conv["identified"] = True
    except IdentificationError as exc:
        conv["identified"] = False
        conv["identification"] = str(exc)
        nan = np.full(theta.size, np.nan)
        stderr = {"opg": nan, "hessian": nan.copy(), "sandwich": nan.copy()}
    s2 = sigma2_gmm(eps)
    phi_used = (1.0 / s2 if s2 > 0 else float("inf")) if phi is None else float(phi)
    extra.update(sigma2=s2, phi=phi_used)
    loglik = None
    if np.all(series.rvol > 0):
        if solve_phi:
            try:
                extra["phi_ml"] = phi_ml(eps)
            except DataError:
                pass
        if math.isfinite(phi_used):
            loglik = loglik_gamma(series.rvol, path.mu, phi_used) * len(series)
    return FitResult(
        model=model.id,
        estimator=estimator,
        names=model.names,
        theta=theta,
        stderr=stderr,
        loglik=loglik,
        criterion=criterion,
        path=path,
        nobs=len(series),
        diagnostics={"ljung_box": _ljung_box_pvalues(eps)},
        convergence=conv,
        init=dict(init),
        extra=extra,
        avar=avar,
        spec=model,
    )


def fit_ml_gamma(
    series: PanelSeries,
    model="amem",
    theta0=None,
    *,
    phi: float | None = None,
    solve_phi: bool = True,
    maxiter: int = 500,
    init: dict | None = None,
) -> FitResult:
    """Gamma quasi-maximum likelihood.

    The objective ``-mean(log mu + x / mu)`` does not depend on the Gamma
    shape; quasi-Newton iterations on the unconstrained scale are followed by
    Fisher-scoring refinements until the score meets
    ``||score|| <= 1e-6 (1 + ||theta||)``.  Data with zeros are fitted through
    :func:`fit_gmm`, which solves the same first-order condition.

    Raises
    ------
    ConvergenceError
        If an interior optimum is not reached within ``maxiter`` iterations.
    """
    model = get_model(model)
    if np.any(series.rvol == 0):
        logger.info("zeros in data: Gamma QML routed through the GMM criterion")
        res = fit_gmm(series, model, theta0, maxiter=maxiter, init=init)
        res.extra["routed_from"] = "ml_gamma"
        return res
    init = dict(init or model.init_stats(series))
    theta0 = _check_theta0(model, model.theta0(series) if theta0 is None else theta0)
    obj = _Objective(model, series, init)
    u0 = model.space.to_free(theta0)
    with np.errstate(all="ignore"):
        res = optimize.minimize(
            obj.value_grad, u0, jac=True, method="BFGS",
            options={"gtol": 1e-9, "maxiter": maxiter},
        )
    u = res.x
    conv = {"optimizer": "BFGS", "message": str(res.message), "iterations": int(res.nit)}
    u, polished = _scoring_polish(obj, u, model.space)
    conv["scoring_steps"] = polished
    theta = model.space.from_free(u)
    out = _finalize_gamma(model, series, theta, init, "ml_gamma", phi=phi, conv=conv, solve_phi=solve_phi)
    _raise_unless_converged(out, theta)
    out.criterion = obj.value(u)
    return out


def _scoring_polish(obj: _Objective, u, space: ParamSpace, max_steps: int = 50):
    """Fisher-scoring steps ``u += A_u^-1 s_u`` with step halving on the objective."""
    steps = 0
    f = obj.value(u)
    for _ in range(max_steps):
        lm, J, eps = obj.pieces_u(u)
        g = ((eps - 1.0)[:, None] * J).mean(axis=0)
        theta = space.from_free(u)
        # convergence judged on the natural-scale score
        Jt = _transform_jacobian(space, u)
        try:
            s_theta = np.linalg.solve(Jt.T, g)
        except np.linalg.LinAlgError:
            break
        if np.linalg.norm(s_theta) <= 0.1 * _score_tol(theta):
            break
        A = J.T @ J / J.shape[0]
        try:
            step = np.linalg.lstsq(A, g, rcond=1e-12)[0]
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(30):
            cand = u + t * step
            fc = obj.value(cand)
            if fc <= f + 1e-15 * abs(f):
                break
            t /= 2
        else:
            break
        u, f = cand, fc
        steps += 1
    return u, steps


def _transform_jacobian(space: ParamSpace, u) -> np.ndarray:
    """``d theta / d u`` by central differences (cheap: no filtering)."""
    _, J, _ = _fd_jacobian(space.from_free, u, rel_step=1e-7, abs_floor=1e-7)
    return J


def _raise_unless_converged(out: FitResult, theta):
    conv = out.convergence
    ok = (not conv["interior"]) or conv["score_norm"] <= conv["score_tol"] or not conv.get("identified", True)
    conv["converged"] = bool(ok)
    if not ok:
        raise ConvergenceError(
            f"{out.model}/{out.estimator}: score norm {conv['score_norm']:.3g} above "
            f"tolerance {conv['score_tol']:.3g}",
            best=out.params,
            trace=conv.get("message"),
        )


def fit_gmm(
    series: PanelSeries,
    model="amem",
    theta0=None,
    *,
    maxiter: int = 200,
    init: dict | None = None,
) -> FitResult:
    """Efficient GMM on the moments ``mean((eps - 1) a) = 0``.

    The squared norm of the moment vector is minimized by Levenberg-Marquardt
    on the unconstrained scale, with ``-mean(eps a a')`` as the moment
    Jacobian.  ``sigma2 = mean((eps - 1)^2)`` and the variance is
    ``sigma2 * A^-1``.  Zeros in the data are allowed.
    """
    model = get_model(model)
    init = dict(init or model.init_stats(series))
    theta0 = _check_theta0(model, model.theta0(series) if theta0 is None else theta0)
    obj = _Objective(model, series, init)
    u0 = model.space.to_free(theta0)

    cache: dict = {}

    def pieces(u):
        key = u.tobytes()
        if key not in cache:
            cache.clear()
            with np.errstate(all="ignore"):
                cache[key] = obj.pieces_u(u)
        return cache[key]

    def resid(u):
        _, J, eps = pieces(u)
        m = ((eps - 1.0)[:, None] * J).mean(axis=0)
        return np.where(np.isfinite(m), m, 1e6)

    def jac(u):
        # exact up to the term (eps - 1) d a / d u, which averages to zero at the root
        _, J, eps = pieces(u)
        out = -(eps[:, None] * J).T @ J / eps.size
        return np.where(np.isfinite(out), out, 0.0)

    res = optimize.least_squares(
        resid, u0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
        max_nfev=maxiter,
    )
    u = res.x
    conv = {"optimizer": "least_squares/lm", "message": str(res.message), "nfev": int(res.nfev)}
    theta = model.space.from_free(u)
    out = _finalize_gamma(model, series, theta, init, "gmm", conv=conv, solve_phi=False,
                          criterion=float(np.sum(res.fun ** 2)))
    _raise_unless_converged(out, theta)
    return out


def fit_ml_lognormal(
    series: PanelSeries,
    model="amem",
    theta0=None,
    *,
    V0: float | None = None,
    v_estimator: str = "mm",
    tol: float = 1e-7,
    max_cycles: int = 200,
    init: dict | None = None,
) -> FitResult:
    """Log-normal ML alternating between ``theta`` (at fixed ``V``) and ``V``.

    The ``theta`` step solves ``sum (ln eps + V/2) a = 0`` as a nonlinear least
    squares problem in ``ln x - ln mu + V/2``.  ``V`` is updated by
    ``v_estimator``: ``"mm"`` (default), ``"ml"`` or ``"logvar"``.

    When the model carries a free scale parameter (Component-MEM ``omega_tau``,
    MEM-MIDAS ``m``), that parameter absorbs the ``V/2`` shift of the ``theta``
    step and the MM update reproduces its input, so the pair drifts along a
    ridge.  The MM request is then served by the ML update (logged and
    recorded in ``extra["v_estimator"]``).
    """
    model = get_model(model)
    x = np.asarray(series.rvol, dtype=float)
    if np.any(x <= 0):
        raise DataError("log-normal ML is unfeasible with zeros in the data")
    if v_estimator not in _V_ESTIMATORS:
        raise ValueError(f"unknown V estimator {v_estimator!r}")
    requested = v_estimator
    if v_estimator == "mm" and model.free_scale:
        logger.warning("%s: MM update of V is not identified with a free scale; using ML", model.id)
        v_estimator = "ml"
    v_update = _V_ESTIMATORS[v_estimator]
    init = dict(init or model.init_stats(series))
    theta0 = _check_theta0(model, model.theta0(series) if theta0 is None else theta0)
    obj = _Objective(model, series, init)
    lx = np.log(x)
    u = model.space.to_free(theta0)
    V = v_ml(x / np.exp(obj.logmu_u(u))) if V0 is None else float(V0)

    def resid(u, V):
        return lx - obj.logmu_u(u) + V / 2

    def jac(u, V):
        _, J, _ = _fd_jacobian(obj.logmu_u, u, rel_step=1e-6, abs_floor=1e-7)
        return -J

    theta = model.space.from_free(u)
    for cycle in range(1, max_cycles + 1):
        try:
            with np.errstate(all="ignore"):
                r = optimize.least_squares(resid, u, jac=jac, args=(V,), method="trf",
                                           xtol=1e-14, ftol=1e-14, gtol=1e-14)
        except ConstraintError as exc:
            raise ConvergenceError(
                f"{model.id}/ml_lognormal: theta step left the admissible region ({exc})",
                best=dict(model.space.as_dict(theta), V=V),
            ) from exc
        u_new = r.x
        theta_new = model.space.from_free(u_new)
        V_new = v_update(x / np.exp(obj.logmu_u(u_new)))
        change = max(float(np.max(np.abs(theta_new - theta))), abs(V_new - V))
        u, theta, V = u_new, theta_new, V_new
        if change < tol:
            break
    else:
        raise ConvergenceError(
            f"{model.id}/ml_lognormal: alternation did not settle in {max_cycles} cycles",
            best=dict(model.space.as_dict(theta), V=V),
        )
    path = model.filter(series, theta, init)
    a = gradient_a(series, model, theta, init)
    eps = path.residuals
    conv = {"cycles": cycle, "last_change": change, "converged": True}
    bound = _at_bound(model.space, theta)
    s = (((np.log(eps) + V / 2) / V)[:, None] * a).mean(axis=0)
    conv.update(score_norm=float(np.linalg.norm(s)), interior=not bound, at_bound=bound)
    try:
        avar = avar_set(ScorePieces(a, eps), "lognormal", V, names=model.names)
        stderr = {k: avar.stderr(k) for k in ("opg", "hessian", "sandwich")}
        conv["identified"] = True
    except IdentificationError as exc:
        avar = None
        nan = np.full(theta.size, np.nan)
        stderr = {"opg": nan, "hessian": nan.copy(), "sandwich": nan.copy()}
        conv.update(identified=False, identification=str(exc))
    # sample analog of E(eps dV b); equals 1 / (2V) when V is the MM estimate
    ortho = -float(np.mean(np.log(eps))) / V**2
    extra = {
        "V": V,
        "v_estimator": v_estimator,
        "v_estimator_requested": requested,
        "V_ml": v_ml(eps),
        "V_mm": v_mm(eps),
        "V_logvar": v_logvar(eps),
        "ortho_V": ortho,
        "sigma2": math.expm1(V),
    }
    return FitResult(
        model=model.id,
        estimator="ml_lognormal",
        names=model.names,
        theta=theta,
        stderr=stderr,
        loglik=loglik_lognormal(x, path.mu, V) * len(x),
        path=path,
        nobs=len(x),
        diagnostics={"ljung_box": _ljung_box_pvalues(eps)},
        convergence=conv,
        init=init,
        extra=extra,
        avar=avar,
        spec=model,
    )
