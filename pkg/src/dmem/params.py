"""
Named parameter vectors with bound-respecting reparametrizations.

Each slot of a :class:`ParamSpace` carries a constraint kind.  Optimizers work
on the unconstrained vector returned by :meth:`ParamSpace.to_free` and map back
with :meth:`ParamSpace.from_free`.

Supported kinds
---------------
``free``
    Real line, identity map.
``positive``
    ``exp`` map.
``lower``
    ``lower + exp(v)``.
``interval``
    ``lo + (hi - lo) * logistic(v)``.
``simplex``
    Members of a named group with weights ``c_k`` such that ``c_k * p_k >= 0``
    and ``sum_k c_k * p_k < 1``; mapped with a multinomial logistic whose last
    (implicit) category is the slack ``1 - sum``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dmem.exceptions import ConstraintError

__all__ = ["ParamSpace", "Slot"]

_SLACK_FLOOR = 1e-10


@dataclass(frozen=True)
class Slot:
    name: str
    kind: str = "free"
    lower: float = -np.inf
    upper: float = np.inf
    group: str | None = None
    weight: float = 1.0


@dataclass(frozen=True)
class ParamSpace:
    slots: tuple[Slot, ...]
    _groups: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        groups: dict[str, list[int]] = {}
        for k, s in enumerate(self.slots):
            if s.kind == "simplex":
                groups.setdefault(s.group, []).append(k)
        object.__setattr__(self, "_groups", groups)

    @classmethod
    def build(cls, slots: Sequence[Slot]) -> ParamSpace:
        return cls(tuple(slots))

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.slots]

    def __len__(self) -> int:
        return len(self.slots)

    def as_dict(self, theta) -> dict[str, float]:
        return {s.name: float(v) for s, v in zip(self.slots, theta)}

    def from_dict(self, values: dict[str, float]) -> np.ndarray:
        return np.array([float(values[s.name]) for s in self.slots])

    # -- feasibility ------------------------------------------------------
    def violations(self, theta) -> list[str]:
        theta = np.asarray(theta, dtype=float)
        out = []
        for s, v in zip(self.slots, theta):
            if not np.isfinite(v):
                out.append(f"{s.name} is not finite")
            elif s.kind == "positive" and v <= 0:
                out.append(f"{s.name} must be > 0 (got {v:.6g})")
            elif s.kind == "lower" and v < s.lower:
                out.append(f"{s.name} must be >= {s.lower} (got {v:.6g})")
            elif s.kind == "interval" and not (s.lower < v < s.upper):
                out.append(f"{s.name} must lie in ({s.lower}, {s.upper}) (got {v:.6g})")
            elif s.kind == "simplex" and v < 0:
                out.append(f"{s.name} must be >= 0 (got {v:.6g})")
        for g, idx in self._groups.items():
            total = sum(self.slots[k].weight * theta[k] for k in idx)
            if total >= 1.0:
                members = " + ".join(
                    (f"{self.slots[k].weight:g}*" if self.slots[k].weight != 1 else "")
                    + self.slots[k].name
                    for k in idx
                )
                out.append(f"persistence {members} = {total:.6g} must be < 1")
        return out

    def is_feasible(self, theta) -> bool:
        return not self.violations(theta)

    def check(self, theta) -> None:
        bad = self.violations(theta)
        if bad:
            raise ConstraintError("; ".join(bad))

    # -- transforms -------------------------------------------------------
    def to_free(self, theta) -> np.ndarray:
        """Map a feasible point to the unconstrained space.

        Points on a boundary (e.g. a zero simplex member) are nudged inside.
        """
        theta = np.asarray(theta, dtype=float)
        u = np.empty_like(theta)
        for k, s in enumerate(self.slots):
            v = theta[k]
            if s.kind == "free":
                u[k] = v
            elif s.kind == "positive":
                u[k] = np.log(max(v, 1e-12))
            elif s.kind == "lower":
                u[k] = np.log(max(v - s.lower, 1e-12))
            elif s.kind == "interval":
                p = (v - s.lower) / (s.upper - s.lower)
                p = min(max(p, 1e-12), 1 - 1e-12)
                u[k] = np.log(p / (1 - p))
        for idx in self._groups.values():
            w = np.array([self.slots[k].weight for k in idx])
            p = np.maximum(w * theta[idx], _SLACK_FLOOR)
            slack = 1.0 - p.sum()
            if slack < _SLACK_FLOOR:
                p = p * (1 - _SLACK_FLOOR) / p.sum()
                slack = _SLACK_FLOOR
            u[idx] = np.log(p / slack)
        return u

    def from_free(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        theta = np.empty_like(u)
        for k, s in enumerate(self.slots):
            v = u[k]
            if s.kind == "free":
                theta[k] = v
            elif s.kind == "positive":
                theta[k] = np.exp(v)
            elif s.kind == "lower":
                theta[k] = s.lower + np.exp(v)
            elif s.kind == "interval":
                theta[k] = s.lower + (s.upper - s.lower) / (1 + np.exp(-v))
        for idx in self._groups.values():
            w = np.array([self.slots[k].weight for k in idx])
            z = np.r_[u[idx], 0.0]
            z = np.exp(z - z.max())
            p = z / z.sum()
            theta[idx] = p[:-1] / w
        return theta
