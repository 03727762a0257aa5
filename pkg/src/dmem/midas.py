"""Beta-lag MIDAS weighting scheme."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["BetaLag", "OMEGA2_LOWER", "beta_weights", "weighted_sum"]

# Optimizer lower bound for the free shape parameter.
OMEGA2_LOWER = 1.001


@dataclass(frozen=True)
class BetaLag:
    """Beta lag polynomial over ``K`` low-frequency lags.

    With ``omega1 = 1`` and ``omega2 > 1`` the weights decline with the lag,
    putting more weight on the most recent observations.
    """

    K: int
    omega1: float = 1.0
    omega2: float = 1.0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"lag count K must be a positive integer, got {self.K!r}")
        for name in ("omega1", "omega2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
            if v < 1.0:
                raise ValueError(f"{name} must be >= 1, got {v!r}")

    def weights(self) -> np.ndarray:
        return beta_weights(self.K, self.omega1, self.omega2)


def _xlogy0(p: float, u: np.ndarray) -> np.ndarray:
    # p * log(u) with 0^0 = 1 and 0^p = 0 for p > 0
    out = np.zeros_like(u)
    if p == 0.0:
        return out
    pos = u > 0
    out[~pos] = -np.inf
    out[pos] = p * np.log(u[pos])
    return out


def beta_weights(K: int, omega1: float = 1.0, omega2: float = 1.0) -> np.ndarray:
    """Normalized beta-lag weights ``delta_k`` for ``k = 1..K``.

    ``delta_k`` is proportional to ``(k/K)**(omega1-1) * (1-k/K)**(omega2-1)``.
    Evaluated in log space to stay finite for large shapes.
    """
    if int(K) != K or K < 1:
        raise ValueError(f"lag count K must be a positive integer, got {K!r}")
    if not (math.isfinite(omega1) and math.isfinite(omega2)):
        raise ValueError("beta-lag shapes must be finite")
    u = np.arange(1, K + 1, dtype=float) / K
    logw = _xlogy0(omega1 - 1.0, u) + _xlogy0(omega2 - 1.0, 1.0 - u)
    top = logw.max()
    if not np.isfinite(top):
        # only possible for K = 1 with omega2 > 1: single lag carries all weight
        return np.ones(K)
    w = np.exp(logw - top)
    return w / w.sum()


def weighted_sum(spec: BetaLag, lags) -> float | np.ndarray:
    """``sum_k delta_k X_{t-k}``; ``lags`` ordered most recent first.

    ``lags`` may be a length-``K`` vector or a ``(T, K)`` matrix of lag rows.
    """
    lags = np.asarray(lags, dtype=float)
    if lags.shape[-1] != spec.K:
        raise ValueError(f"expected {spec.K} lags, got {lags.shape[-1]}")
    out = lags @ spec.weights()
    return float(out) if out.ndim == 0 else out
