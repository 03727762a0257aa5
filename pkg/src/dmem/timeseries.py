"""
Mixed-frequency panel of daily realized measures.

A :class:`PanelSeries` holds daily open-to-close returns and realized kernel
volatilities, the mapping of each day to a low-frequency period ``t`` with a
within-period day index ``i``, and optionally a low-frequency macro series
``X_t`` keyed by the same periods.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
import pandas as pd

from dmem.exceptions import DataError, MissingMacroError

logger = logging.getLogger(__name__)

__all__ = [
    "CsvSchema",
    "DayObs",
    "MacroSeries",
    "MacroTransform",
    "PanelSeries",
    "assign_periods",
    "attach_macro",
    "load_daily_csv",
    "load_macro_csv",
    "transform_macro",
]

_FREQ_ALIASES = {
    "M": "M",
    "month": "M",
    "monthly": "M",
    "calendar-month": "M",
    "W": "W",
    "week": "W",
    "weekly": "W",
    "calendar-week": "W",
}
_PERIODS_PER_YEAR = {"M": 12, "W": 52}


def _normalize_freq(frequency: str) -> str:
    try:
        return _FREQ_ALIASES[frequency]
    except KeyError:
        raise ValueError(f"unknown period frequency {frequency!r}") from None


def _readonly(a, dtype=None) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class DayObs(NamedTuple):
    date: np.datetime64
    ret: float
    rvol: float


class MacroTransform(str, enum.Enum):
    """How raw low-frequency values are turned into the MIDAS driver."""

    LEVEL = "level"
    MOM_ANNUALIZED = "mom_annualized"


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for a daily CSV file.

    Exactly one of ``rvol`` or ``rvar`` must be given.  When ``rvar`` is used
    the volatility is ``sqrt(annualization * rvar)``; pass
    ``annualization=1.0`` for variance that is already annualized.
    """

    date: str = "date"
    ret: str = "ret"
    rvol: str | None = None
    rvar: str | None = None
    annualization: float = 252.0
    ret_scale: float = 1.0
    date_format: str | None = None

    def __post_init__(self):
        if (self.rvol is None) == (self.rvar is None):
            raise ValueError("schema must declare exactly one of rvol or rvar")
        if not self.annualization > 0:
            raise ValueError("annualization factor must be positive")


@dataclass(frozen=True)
class MacroSeries:
    """Low-frequency values on consecutive period ordinals."""

    freq: str
    periods: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "periods", _readonly(self.periods, np.int64))
        object.__setattr__(self, "values", _readonly(self.values, float))
        if self.periods.shape != self.values.shape:
            raise DataError("macro periods and values differ in length")
        if self.periods.size and np.any(np.diff(self.periods) != 1):
            raise DataError("macro periods must be consecutive")

    def labels(self) -> list[str]:
        return [str(pd.Period(ordinal=int(p), freq=self.freq)) for p in self.periods]


@dataclass(frozen=True)
class PanelSeries:
    """Immutable daily panel nested in low-frequency periods.

    Attributes
    ----------
    dates : ndarray of datetime64[D]
        Strictly increasing trading days.
    ret : ndarray
        Open-to-close log-returns (annualized percent).
    rvol : ndarray
        Realized kernel volatility (annualized percent), nonnegative.
    freq : str or None
        Period frequency, ``"M"`` or ``"W"``, once periods are assigned.
    period : ndarray of int64 or None
        Period ordinal of each day.
    day_in_period : ndarray of int64 or None
        One-based index ``i`` of each day within its period.
    macro : MacroSeries or None
        Transformed low-frequency driver.
    """

    dates: np.ndarray
    ret: np.ndarray
    rvol: np.ndarray
    freq: str | None = None
    period: np.ndarray | None = None
    day_in_period: np.ndarray | None = None
    macro: MacroSeries | None = None
    n_dropped: int = 0
    resorted: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        dates = np.asarray(self.dates).astype("datetime64[D]")
        ret = np.asarray(self.ret, dtype=float)
        rvol = np.asarray(self.rvol, dtype=float)
        if not (dates.shape == ret.shape == rvol.shape) or dates.ndim != 1:
            raise DataError("dates, ret and rvol must be 1-d and of equal length")
        if dates.size > 1 and np.any(np.diff(dates) <= np.timedelta64(0, "D")):
            raise DataError("days must be strictly increasing")
        if not np.all(np.isfinite(ret)):
            raise DataError("returns must be finite")
        if not np.all(np.isfinite(rvol)) or np.any(rvol < 0):
            raise DataError("realized volatility must be finite and nonnegative")
        object.__setattr__(self, "dates", _readonly(dates))
        object.__setattr__(self, "ret", _readonly(ret))
        object.__setattr__(self, "rvol", _readonly(rvol))
        if self.period is not None:
            period = _readonly(self.period, np.int64)
            dip = _readonly(self.day_in_period, np.int64)
            if period.shape != dates.shape or dip.shape != dates.shape:
                raise DataError("period index must cover every day")
            object.__setattr__(self, "period", period)
            object.__setattr__(self, "day_in_period", dip)

    # -- construction -----------------------------------------------------
    @classmethod
    def from_days(cls, days: Iterable[DayObs], frequency: str | None = None) -> PanelSeries:
        days = list(days)
        out = cls(
            dates=np.array([d.date for d in days], dtype="datetime64[D]"),
            ret=np.array([d.ret for d in days], dtype=float),
            rvol=np.array([d.rvol for d in days], dtype=float),
        )
        return assign_periods(out, frequency) if frequency else out

    # -- views ------------------------------------------------------------
    def __len__(self) -> int:
        return self.dates.shape[0]

    def __iter__(self) -> Iterator[DayObs]:
        for d, r, v in zip(self.dates, self.ret, self.rvol):
            yield DayObs(d, float(r), float(v))

    @property
    def neg(self) -> np.ndarray:
        """Indicator of a strictly negative return (zero counts as non-negative)."""
        return (self.ret < 0).astype(float)

    def window(self, start: int, stop: int) -> PanelSeries:
        """Days ``start`` (inclusive) to ``stop`` (exclusive); macro kept whole."""
        sl = slice(start, stop)
        return replace(
            self,
            dates=self.dates[sl],
            ret=self.ret[sl],
            rvol=self.rvol[sl],
            period=None if self.period is None else self.period[sl],
            day_in_period=None if self.day_in_period is None else self.day_in_period[sl],
            meta=dict(self.meta),
        )

    def with_values(self, ret=None, rvol=None) -> PanelSeries:
        return replace(
            self,
            ret=self.ret if ret is None else ret,
            rvol=self.rvol if rvol is None else rvol,
            meta=dict(self.meta),
        )

    def _require_periods(self):
        if self.period is None:
            raise DataError("periods not assigned; call assign_periods first")

    def period_codes(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct period ordinals in order and, per day, its row in that array."""
        self._require_periods()
        uniq, codes = np.unique(self.period, return_inverse=True)
        return uniq, codes.astype(np.int64)

    def days_per_period(self) -> np.ndarray:
        """``N_t`` for each distinct period."""
        uniq, codes = self.period_codes()
        return np.bincount(codes, minlength=uniq.size)

    def period_labels(self) -> list[str]:
        uniq, _ = self.period_codes()
        return [str(pd.Period(ordinal=int(p), freq=self.freq)) for p in uniq]

    def macro_lags(self, K: int) -> np.ndarray:
        """Lag matrix ``X_{t-1}, ..., X_{t-K}`` for each distinct period.

        Returns an array of shape ``(T, K)``, most recent lag first.
        """
        if self.macro is None:
            raise MissingMacroError("no macro series attached")
        uniq, _ = self.period_codes()
        first = int(self.macro.periods[0]) if self.macro.periods.size else 0
        pos = uniq[:, None] - np.arange(1, K + 1)[None, :] - first
        bad = (pos < 0) | (pos >= self.macro.values.size)
        if bad.any():
            missing = sorted(set((uniq[:, None] - np.arange(1, K + 1)[None, :])[bad].tolist()))
            labels = [str(pd.Period(ordinal=int(p), freq=self.freq)) for p in missing[:10]]
            raise MissingMacroError(
                f"macro lags missing for {len(missing)} period(s), e.g. {labels}"
            )
        return self.macro.values[pos]

    # -- io ---------------------------------------------------------------
    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {"date": pd.to_datetime(self.dates), "ret": self.ret, "rvol": self.rvol}
        )
        if self.period is not None:
            df["period"] = [str(p) for p in pd.PeriodIndex.from_ordinals(self.period, freq=self.freq)]
            df["i"] = self.day_in_period
        return df

    def to_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        """Write days to CSV with full round-trip float precision."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            self.to_frame().to_csv(fh, index=False, float_format="%.17g", date_format="%Y-%m-%d")


def load_daily_csv(path, schema: CsvSchema | None = None) -> PanelSeries:
    """Read a daily CSV into a :class:`PanelSeries` (periods unassigned).

    Rows with any missing required value are dropped and counted in
    ``n_dropped``.  Unsorted input is sorted and flagged via ``resorted``.
    """
    schema = schema or CsvSchema(rvol="rvol")
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    value_col = schema.rvol if schema.rvol is not None else schema.rvar
    for col in (schema.date, schema.ret, value_col):
        if col not in df.columns:
            raise DataError(f"column {col!r} not found in {path}")
    df = df[[schema.date, schema.ret, value_col]]
    n_before = len(df)
    df = df.dropna()
    n_dropped = n_before - len(df)
    if df.empty:
        raise DataError("no observations")

    dates = pd.to_datetime(df[schema.date], format=schema.date_format, errors="coerce")
    if dates.isna().any():
        row = int(np.flatnonzero(dates.isna().to_numpy())[0])
        raw = df[schema.date].iloc[row]
        raise DataError(f"unparsable date {raw!r} at data row {df.index[row] + 1}")

    values = pd.to_numeric(df[value_col], errors="coerce").to_numpy(float)
    ret = pd.to_numeric(df[schema.ret], errors="coerce").to_numpy(float) * schema.ret_scale
    if np.isnan(values).any() or np.isnan(ret).any():
        raise DataError("non-numeric value in return or realized column")
    if schema.rvar is not None:
        if np.any(values < 0):
            row = int(np.flatnonzero(values < 0)[0])
            raise DataError(f"negative variance at data row {df.index[row] + 1}")
        rvol = np.sqrt(schema.annualization * values)
    else:
        if np.any(values < 0):
            raise DataError("negative volatility")
        rvol = values

    d = dates.to_numpy().astype("datetime64[D]")
    resorted = False
    if d.size > 1 and np.any(np.diff(d) < np.timedelta64(0, "D")):
        logger.warning("input %s not sorted by date; sorting", path)
        order = np.argsort(d, kind="stable")
        d, ret, rvol = d[order], ret[order], rvol[order]
        resorted = True
    if d.size > 1 and np.any(np.diff(d) == np.timedelta64(0, "D")):
        raise DataError("duplicate dates in input")
    if n_dropped:
        logger.info("dropped %d row(s) with missing values", n_dropped)
    return PanelSeries(dates=d, ret=ret, rvol=rvol, n_dropped=n_dropped, resorted=resorted)


def _period_ordinals(dates: np.ndarray, freq: str) -> np.ndarray:
    # same ordinals as pandas Period, without the nanosecond date-range limit
    if freq == "M":
        return dates.astype("datetime64[M]").astype(np.int64)
    # weeks end on Sunday; 1970-01-01 is a Thursday
    return (dates.astype(np.int64) + 3) // 7 + 1


def assign_periods(series: PanelSeries, frequency: str = "M") -> PanelSeries:
    """Map every day to its calendar period and within-period index ``i``."""
    freq = _normalize_freq(frequency)
    period = _period_ordinals(np.asarray(series.dates, dtype="datetime64[D]"), freq)
    dip = np.ones(period.size, dtype=np.int64)
    if period.size:
        starts = np.r_[True, period[1:] != period[:-1]]
        run_id = np.cumsum(starts) - 1
        first_pos = np.flatnonzero(starts)
        dip = np.arange(period.size) - first_pos[run_id] + 1
    macro = series.macro if series.macro is not None and series.macro.freq == freq else None
    return replace(series, freq=freq, period=period, day_in_period=dip, macro=macro,
                   meta=dict(series.meta))


def _to_ordinal(label, freq: str) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return int(pd.Period(label, freq=freq).ordinal)


def transform_macro(values: np.ndarray, transform: MacroTransform | str, freq: str = "M") -> np.ndarray:
    """Apply a macro transform; the growth transform returns one fewer value.

    ``mom_annualized`` is ``sqrt(periods_per_year) * 100 * (v_t / v_{t-1} - 1)``.
    """
    transform = MacroTransform(transform)
    values = np.asarray(values, dtype=float)
    if transform is MacroTransform.LEVEL:
        return values.copy()
    if np.any(values <= 0):
        raise DataError("growth transform requires positive levels")
    scale = math.sqrt(_PERIODS_PER_YEAR[freq]) * 100.0
    return scale * (values[1:] / values[:-1] - 1.0)


def attach_macro(
    series: PanelSeries,
    raw: Iterable[tuple[object, float]],
    transform: MacroTransform | str = MacroTransform.LEVEL,
) -> PanelSeries:
    """Transform ``(period, value)`` pairs and key them by period ordinal.

    Raises
    ------
    DataError
        If periods are not assigned, if the raw pairs skip any period inside
        their range, or if they do not reach the last period of the series.
    """
    series._require_periods()
    freq = series.freq
    pairs = sorted((_to_ordinal(p, freq), float(v)) for p, v in raw)
    if not pairs:
        raise DataError("empty macro series")
    ords = np.array([p for p, _ in pairs], dtype=np.int64)
    vals = np.array([v for _, v in pairs], dtype=float)
    if np.any(np.diff(ords) == 0):
        raise DataError("duplicate macro periods")
    full = np.arange(ords[0], max(ords[-1], int(series.period.max())) + 1)
    missing = np.setdiff1d(full, ords)
    if missing.size:
        labels = [str(pd.Period(ordinal=int(p), freq=freq)) for p in missing]
        raise DataError(f"macro series has gaps at periods: {', '.join(labels)}")
    out_vals = transform_macro(vals, transform, freq)
    out_ords = ords[1:] if MacroTransform(transform) is MacroTransform.MOM_ANNUALIZED else ords
    macro = MacroSeries(freq=freq, periods=out_ords, values=out_vals)
    return replace(series, macro=macro, meta=dict(series.meta))


def load_macro_csv(path, date: str = "date", value: str = "value") -> list[tuple[str, float]]:
    """Read ``(period label, value)`` pairs; labels are parsed later by frequency."""
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    for col in (date, value):
        if col not in df.columns:
            raise DataError(f"column {col!r} not found in {path}")
    df = df[[date, value]].dropna()
    return [(str(d), float(v)) for d, v in zip(df[date], df[value])]
