"""Nearest-neighbour propensity-score matching with replacement.

Design phase only: nothing here reads outcomes.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class MatchMap:
    """Treated day -> matched control day, with control multiplicities.

    ``treated`` and ``control`` are parallel index arrays (one entry per
    treated day, ascending in ``treated``); ``k[j]`` counts how many treated
    days use day ``j`` as their match (zero for treated and unused days).
    """

    treated: np.ndarray
    control: np.ndarray
    n_days: int

    def __post_init__(self):
        t = np.array(self.treated, dtype=np.int64)
        c = np.array(self.control, dtype=np.int64)
        if t.shape != c.shape:
            raise ValueError("treated and control index arrays differ in length")
        order = np.argsort(t, kind="stable")
        t, c = t[order], c[order]
        if len(np.unique(t)) != len(t):
            raise ValueError("a treated day appears more than once")
        if len(t) and (min(t.min(), c.min()) < 0 or max(t.max(), c.max()) >= self.n_days):
            raise ValueError("match index out of range")
        if np.intersect1d(t, c).size:
            raise ValueError("a day is used both as treated and as matched control")
        for a in (t, c):
            a.setflags(write=False)
        object.__setattr__(self, "treated", t)
        object.__setattr__(self, "control", c)

    @property
    def k(self) -> np.ndarray:
        return np.bincount(self.control, minlength=self.n_days)

    @property
    def pairs(self) -> dict[int, int]:
        return dict(zip(self.treated.tolist(), self.control.tolist()))

    def __len__(self):
        return len(self.treated)

    def restrict(self, keep) -> "MatchMap":
        """Sub-map keeping the pairs where ``keep`` (one flag per pair) is true."""
        keep = np.asarray(keep, dtype=bool)
        return MatchMap(self.treated[keep], self.control[keep], self.n_days)

    def __eq__(self, other):
        return (isinstance(other, MatchMap) and self.n_days == other.n_days
                and np.array_equal(self.treated, other.treated)
                and np.array_equal(self.control, other.control))

    __hash__ = None


def nn_match(scores, w) -> MatchMap:
    """Match every treated day to the control with the closest score.

    Distance is ``|s_i - s_j|``; ties go to the earliest control day.
    Controls may be reused without limit.
    """
    s = np.asarray(scores, dtype=float)
    w = np.asarray(w).astype(bool)
    if s.shape != w.shape:
        raise ValueError("scores and treatment vector differ in length")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    treated = np.flatnonzero(w)
    controls = np.flatnonzero(~w)
    if controls.size == 0:
        raise ValidationError("no control days to match to")
    if treated.size == 0:
        return MatchMap(treated, treated.copy(), len(s))

    # Unique control score values with the earliest day holding each.
    values, first = np.unique(s[controls], return_index=True)
    earliest = controls[first]
    st = s[treated]
    pos = np.searchsorted(values, st)
    left = np.clip(pos - 1, 0, len(values) - 1)
    right = np.clip(pos, 0, len(values) - 1)
    d_left = np.abs(st - values[left])
    d_right = np.abs(st - values[right])
    take_right = (d_right < d_left) | ((d_right == d_left) & (earliest[right] < earliest[left]))
    match = np.where(take_right, earliest[right], earliest[left])
    return MatchMap(treated, match, len(s))


def nn_match_bruteforce(scores, w) -> MatchMap:
    """Exhaustive argmin over all controls; reference for :func:`nn_match`."""
    s = np.asarray(scores, dtype=float)
    w = np.asarray(w).astype(bool)
    controls = np.flatnonzero(~w)
    if controls.size == 0:
        raise ValidationError("no control days to match to")
    treated = np.flatnonzero(w)
    match = []
    for i in treated:
        best, best_d = -1, np.inf
        for j in controls:
            d = abs(s[i] - s[j])
            if d < best_d:
                best, best_d = j, d
        match.append(best)
    return MatchMap(treated, np.array(match, dtype=np.int64), len(s))


def match_multiplicity(m: MatchMap, n_controls: int) -> dict[int, int]:
    """Number of control days used ``K`` times, for every observed ``K``.

    Controls never used are counted under ``K = 0``.
    """
    used = Counter(Counter(m.control.tolist()).values())
    n_used = sum(used.values())
    if n_used > n_controls:
        raise ValueError(f"{n_used} distinct controls used but only {n_controls} available")
    hist = {0: n_controls - n_used}
    hist.update(used)
    return {k: hist[k] for k in sorted(hist) if hist[k] or k == 0}


@dataclass(frozen=True, eq=False)
class OverlapReport:
    treated_range: tuple
    control_range: tuple
    distance: np.ndarray
    flagged: np.ndarray
    outside_support: np.ndarray
    caliper: float

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.sum())

    def summary(self) -> dict:
        return {
            "treated_min": self.treated_range[0],
            "treated_max": self.treated_range[1],
            "control_min": self.control_range[0],
            "control_max": self.control_range[1],
            "caliper": self.caliper,
            "n_treated": int(len(self.distance)),
            "n_beyond_caliper": self.n_flagged,
            "n_outside_control_support": int(self.outside_support.sum()),
            "max_distance": float(self.distance.max()) if len(self.distance) else 0.0,
        }


def overlap_check(e_hat, w, caliper_warn: float = 0.1) -> OverlapReport:
    """Per-treated-day distance to the nearest control score.

    Diagnostic only: days beyond ``caliper_warn`` are flagged, never dropped.
    ``distance`` and the flags are in the order of the treated days.
    """
    s = np.asarray(e_hat, dtype=float)
    w = np.asarray(w).astype(bool)
    if w.all() or not w.any():
        raise ValidationError("overlap check needs both treated and control days")
    st, sc = s[w], np.sort(s[~w])
    pos = np.searchsorted(sc, st)
    lo = sc[np.clip(pos - 1, 0, len(sc) - 1)]
    hi = sc[np.clip(pos, 0, len(sc) - 1)]
    dist = np.minimum(np.abs(st - lo), np.abs(st - hi))
    return OverlapReport(
        treated_range=(float(st.min()), float(st.max())),
        control_range=(float(sc[0]), float(sc[-1])),
        distance=dist,
        flagged=dist > caliper_warn,
        outside_support=(st < sc[0]) | (st > sc[-1]),
        caliper=float(caliper_warn),
    )


def write_matches(m: MatchMap, dates, path) -> None:
    """Audit file: one row per treated day with its matched control date."""
    dates = [str(d) for d in dates]
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["treated_date", "control_date"])
        for t, c in zip(m.treated, m.control):
            out.writerow([dates[t], dates[c]])


def read_matches(path, dates) -> MatchMap:
    dates = [str(d) for d in dates]
    index = {d: i for i, d in enumerate(dates)}
    treated, control = [], []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["treated_date", "control_date"]:
            raise ValidationError(f"{path}: not a match file (header {header})")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 2 or row[0] not in index or row[1] not in index:
                raise ValidationError(f"{path}: row {row_no}: unknown date(s) {row}")
            treated.append(index[row[0]])
            control.append(index[row[1]])
    return MatchMap(np.array(treated, dtype=np.int64), np.array(control, dtype=np.int64), len(dates))
