"""Daily series data model, validation, exposure lags and treatment assignment.

A :class:`DailySeries` is stored column-wise (one numpy array per variable)
with read-only arrays; :meth:`DailySeries.records` gives the row view.

Ingestion schema (comma separated, one row per day, header required)::

    date,exposure,temperature,humidity,influenza,holiday,y.<cause>.<age>,...

``date`` is ISO-8601, the flags are ``0``/``1`` and every ``y.<cause>.<age>``
column holds the non-negative integer count for one (cause, age) cell.  An
optional ``y.total`` column is checked against the sum of the cells.  Blank
exposure/temperature/humidity cells are read as missing and may be filled by
:func:`validate`; blank flags or counts are parse errors.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

COVARIATE_COLUMNS = ("exposure", "temperature", "humidity")
FLAG_COLUMNS = ("influenza", "holiday")
BASE_COLUMNS = ("date",) + COVARIATE_COLUMNS + FLAG_COLUMNS
OUTCOME_PREFIX = "y."
TOTAL_COLUMN = "y.total"

Stratum = tuple  # (cause, age)


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DailyRecord:
    date: dt.date
    exposure: float
    temperature: float
    humidity: float
    influenza: bool
    holiday: bool
    outcomes: Mapping[Stratum, int] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class DailySeries:
    """Ordered daily records held as parallel read-only arrays.

    ``outcomes`` maps ``(cause, age)`` to an integer count array.  It is empty
    when the series was read for the design phase, where outcomes must not be
    touched.
    """

    dates: np.ndarray
    exposure: np.ndarray
    temperature: np.ndarray
    humidity: np.ndarray
    influenza: np.ndarray
    holiday: np.ndarray
    outcomes: Mapping[Stratum, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.dates)
        object.__setattr__(self, "dates", _frozen(self.dates, "datetime64[D]"))
        for name in COVARIATE_COLUMNS:
            object.__setattr__(self, name, _frozen(getattr(self, name), float))
        for name in FLAG_COLUMNS:
            object.__setattr__(self, name, _frozen(getattr(self, name), bool))
        outcomes = {tuple(k): _frozen(v, np.int64) for k, v in self.outcomes.items()}
        object.__setattr__(self, "outcomes", outcomes)
        for name in COVARIATE_COLUMNS + FLAG_COLUMNS:
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name!r} has length {len(getattr(self, name))}, expected {n}")
        for key, v in outcomes.items():
            if len(v) != n:
                raise ValidationError(f"outcome {key!r} has length {len(v)}, expected {n}")

    def __len__(self):
        return len(self.dates)

    @classmethod
    def from_records(cls, records) -> "DailySeries":
        records = list(records)
        keys = sorted({k for r in records for k in r.outcomes})
        return cls(
            dates=np.array([np.datetime64(r.date, "D") for r in records], dtype="datetime64[D]"),
            exposure=[r.exposure for r in records],
            temperature=[r.temperature for r in records],
            humidity=[r.humidity for r in records],
            influenza=[r.influenza for r in records],
            holiday=[r.holiday for r in records],
            outcomes={k: [r.outcomes[k] for r in records] for k in keys},
        )

    def records(self) -> Iterator[DailyRecord]:
        keys = self.strata
        for i in range(len(self)):
            yield DailyRecord(
                date=self.dates[i].astype(dt.date),
                exposure=float(self.exposure[i]),
                temperature=float(self.temperature[i]),
                humidity=float(self.humidity[i]),
                influenza=bool(self.influenza[i]),
                holiday=bool(self.holiday[i]),
                outcomes={k: int(self.outcomes[k][i]) for k in keys},
            )

    @property
    def strata(self) -> list:
        return sorted(self.outcomes)

    @property
    def causes(self) -> list:
        return sorted({k[0] for k in self.outcomes})

    @property
    def ages(self) -> list:
        return sorted({k[1] for k in self.outcomes})

    @property
    def has_outcomes(self) -> bool:
        return bool(self.outcomes)

    def outcome(self, cause: str | None = None, age: str | None = None) -> np.ndarray:
        """Daily counts summed over every cell matching ``cause`` and ``age``.

        ``None`` means "all", so ``outcome()`` is the total.
        """
        keys = [k for k in self.strata
                if (cause is None or k[0] == cause) and (age is None or k[1] == age)]
        if not keys:
            raise KeyError(f"no outcome stratum matches cause={cause!r}, age={age!r}")
        return np.sum([self.outcomes[k] for k in keys], axis=0).astype(np.int64)

    def without_outcomes(self) -> "DailySeries":
        return replace(self, outcomes={})

    def date_strings(self) -> list[str]:
        return [str(d) for d in self.dates]


@dataclass(frozen=True, eq=False)
class TreatmentAssignment:
    threshold: float
    lag_window: int | None
    x_lagged: np.ndarray
    w: np.ndarray

    @property
    def n_treated(self) -> int:
        return int(self.w.sum())

    @property
    def n_control(self) -> int:
        return int(len(self.w) - self.w.sum())


@dataclass(frozen=True)
class IndicatorRules:
    heat_threshold: float = 28.0
    summer_break_months: tuple = (7, 8)
    warm_start: tuple = (5, 1)
    warm_end: tuple = (9, 30)
    weekend_days: tuple = (5, 6)  # Monday == 0


@dataclass(frozen=True, eq=False)
class Indicators:
    heat: np.ndarray
    july_august: np.ndarray
    warm_season: np.ndarray
    weekend: np.ndarray
    month: np.ndarray
    day_of_week: np.ndarray


@dataclass(frozen=True)
class GapPolicy:
    interpolate: bool = True
    max_gap: int = 3


def lag_mean(values, window: int) -> np.ndarray:
    """Moving average of the current and previous ``window - 1`` days.

    The first ``window - 1`` days average over the available prefix, so the
    output has the same length as the input.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("lag_mean needs a non-empty 1-D series")
    if int(window) != window or window < 1:
        raise ValueError(f"window must be an integer >= 1, got {window!r}")
    if np.isnan(x).any():
        raise ValueError("lag_mean input contains missing values; validate the series first")
    window = int(window)
    out = np.empty_like(x)
    head = min(window - 1, x.size)
    out[:head] = np.cumsum(x[:head]) / np.arange(1, head + 1)
    if x.size >= window:
        out[window - 1:] = np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=1)
    return out


def assign_treatment(x_lagged, threshold: float, lag_window: int | None = None) -> TreatmentAssignment:
    """Binary high-exposure indicator, ``w = x_lagged >= threshold``."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold!r}")
    x = np.asarray(x_lagged, dtype=float)
    if np.isnan(x).any():
        raise ValueError("lagged exposure contains missing values")
    w = x >= threshold
    a = TreatmentAssignment(threshold=float(threshold), lag_window=lag_window,
                            x_lagged=_frozen(x), w=_frozen(w))
    logger.info("treatment at %.3g: %d treated, %d control days", threshold, a.n_treated, a.n_control)
    return a


def treatment_from_series(series: DailySeries, threshold: float = 40.0, window: int = 2) -> TreatmentAssignment:
    return assign_treatment(lag_mean(series.exposure, window), threshold, lag_window=window)


def calendar_parts(dates) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (month 1-12, day of month, day of week with Monday == 0)."""
    d = np.asarray(dates, dtype="datetime64[D]")
    month = d.astype("datetime64[M]").astype(np.int64) % 12 + 1
    day = (d - d.astype("datetime64[M]")).astype(np.int64) + 1
    # 1970-01-01 was a Thursday.
    dow = (d.astype(np.int64) + 3) % 7
    return month, day, dow


def derive_indicators(series: DailySeries, rules: IndicatorRules = IndicatorRules()) -> Indicators:
    month, day, dow = calendar_parts(series.dates)
    md = month * 100 + day
    start = rules.warm_start[0] * 100 + rules.warm_start[1]
    end = rules.warm_end[0] * 100 + rules.warm_end[1]
    return Indicators(
        heat=_frozen(series.temperature > rules.heat_threshold),
        july_august=_frozen(np.isin(month, rules.summer_break_months)),
        warm_season=_frozen((md >= start) & (md <= end)),
        weekend=_frozen(np.isin(dow, rules.weekend_days)),
        month=_frozen(month),
        day_of_week=_frozen(dow),
    )


def _missing_runs(mask):
    """Yield (start, stop) index ranges of consecutive True values."""
    i, n = 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j < n and mask[j]:
                j += 1
            yield i, j
            i = j
        else:
            i += 1


def validate(series: DailySeries, policy: GapPolicy = GapPolicy()) -> DailySeries:
    """Check the series contract and fill short covariate gaps.

    Raises :class:`ValidationError` listing every problem found, each message
    naming the offending date(s).
    """
    problems = []
    n = len(series)
    if n == 0:
        raise ValidationError("series is empty")
    dates = series.dates
    names = series.date_strings()
    steps = np.diff(dates.astype(np.int64))
    for i in np.flatnonzero(steps <= 0):
        problems.append(f"dates not strictly increasing at row {i + 2}: {names[i]} then {names[i + 1]}")
    for i in np.flatnonzero(steps > 1):
        first = dates[i] + 1
        last = dates[i + 1] - 1
        problems.append(f"missing day(s) {first}..{last}: outcome counts unobserved")

    filled = {}
    for name in COVARIATE_COLUMNS:
        x = np.array(getattr(series, name), dtype=float)
        for a, b in _missing_runs(np.isnan(x)):
            span = f"{names[a]}..{names[b - 1]}"
            if not policy.interpolate:
                problems.append(f"{name} missing on {span}")
            elif b - a > policy.max_gap:
                problems.append(f"{name} missing on {b - a} consecutive days {span} (max {policy.max_gap})")
            elif a == 0 or b == n:
                problems.append(f"{name} missing on {span} at the series edge; cannot interpolate")
            else:
                t = np.arange(a, b)
                x[a:b] = x[a - 1] + (x[b] - x[a - 1]) * (t - (a - 1)) / (b - (a - 1))
                logger.info("interpolated %s on %s", name, span)
        filled[name] = x

    exp = filled["exposure"]
    for i in np.flatnonzero(exp < 0):
        problems.append(f"negative exposure on {names[i]}")
    hum = filled["humidity"]
    for i in np.flatnonzero((hum < 0) | (hum > 100)):
        problems.append(f"humidity {hum[i]} outside [0, 100] on {names[i]}")
    for key in series.strata:
        y = series.outcomes[key]
        for i in np.flatnonzero(y < 0):
            problems.append(f"negative count {y[i]} for {key[0]}/{key[1]} on {names[i]}")
    if problems:
        raise ValidationError(f"series failed validation ({len(problems)} problem(s))", problems)
    return replace(series, **filled)


def _parse_float(text, row, col):
    text = text.strip()
    if text == "" or text.upper() in ("NA", "NAN"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"row {row}: column {col!r}: not a number: {text!r}") from None


def _parse_flag(text, row, col):
    text = text.strip()
    if text not in ("0", "1"):
        raise ValidationError(f"row {row}: column {col!r}: flag must be 0 or 1, got {text!r}")
    return text == "1"


def _parse_count(text, row, col):
    text = text.strip()
    if text == "":
        raise ValidationError(f"row {row}: column {col!r}: outcome count missing")
    try:
        return int(text)
    except ValueError:
        raise ValidationError(f"row {row}: column {col!r}: not an integer count: {text!r}") from None


def outcome_column(key) -> str:
    return f"{OUTCOME_PREFIX}{key[0]}.{key[1]}"


def read_series(path, outcomes: bool = True) -> DailySeries:
    """Parse the delimited daily file.

    With ``outcomes=False`` outcome columns are neither parsed nor kept, which
    is how the design phase reads its input.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        missing = [c for c in BASE_COLUMNS if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing required column(s) {missing}")
        if len(set(header)) != len(header):
            raise ValidationError(f"{path}: duplicated column names in header")
        pos = {c: header.index(c) for c in BASE_COLUMNS}
        strata = {}
        for j, h in enumerate(header):
            if h.startswith(OUTCOME_PREFIX) and h != TOTAL_COLUMN:
                parts = h[len(OUTCOME_PREFIX):].split(".")
                if len(parts) != 2 or not all(parts):
                    raise ValidationError(f"{path}: bad outcome column {h!r}; expected y.<cause>.<age>")
                strata[tuple(parts)] = j
        total_pos = header.index(TOTAL_COLUMN) if TOTAL_COLUMN in header else None
        if outcomes and not strata:
            raise ValidationError(f"{path}: no outcome columns (y.<cause>.<age>)")

        cols = {c: [] for c in BASE_COLUMNS}
        ys = {k: [] for k in strata}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            try:
                cols["date"].append(dt.date.fromisoformat(row[pos["date"]].strip()))
            except ValueError:
                raise ValidationError(f"row {row_no}: bad ISO date {row[pos['date']]!r}") from None
            for c in COVARIATE_COLUMNS:
                cols[c].append(_parse_float(row[pos[c]], row_no, c))
            for c in FLAG_COLUMNS:
                cols[c].append(_parse_flag(row[pos[c]], row_no, c))
            if outcomes:
                for k, j in strata.items():
                    ys[k].append(_parse_count(row[j], row_no, header[j]))
                if total_pos is not None:
                    total = _parse_count(row[total_pos], row_no, TOTAL_COLUMN)
                    cell_sum = sum(ys[k][-1] for k in strata)
                    if total != cell_sum:
                        raise ValidationError(
                            f"row {row_no}: {TOTAL_COLUMN}={total} but strata sum to {cell_sum}")
    if not cols["date"]:
        raise ValidationError(f"{path}: no data rows")
    return DailySeries(
        dates=np.array(cols["date"], dtype="datetime64[D]"),
        exposure=cols["exposure"],
        temperature=cols["temperature"],
        humidity=cols["humidity"],
        influenza=cols["influenza"],
        holiday=cols["holiday"],
        outcomes=ys if outcomes else {},
    )


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_series(series: DailySeries, path) -> None:
    """Write ``series`` in the ingestion schema; floats round-trip exactly."""
    keys = series.strata
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(list(BASE_COLUMNS) + [outcome_column(k) for k in keys])
        for i, d in enumerate(series.date_strings()):
            out.writerow(
                [d]
                + [_fmt(getattr(series, c)[i]) for c in COVARIATE_COLUMNS]
                + [int(getattr(series, c)[i]) for c in FLAG_COLUMNS]
                + [int(series.outcomes[k][i]) for k in keys]
            )
