"""Analysis phase: attributable counts from the matched pairs.

Every stratum reuses the same :class:`~admatch.matching.MatchMap`, so
stratum estimates add up exactly to the total.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import DailySeries
from .matching import MatchMap

logger = logging.getLogger(__name__)

ALL = "all"


class EmptyImpactWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DayImpact:
    day: int
    y_obs: int
    y_c: int

    @property
    def ad(self) -> int:
        return self.y_obs - self.y_c


def impute_and_diff(outcomes, m: MatchMap, w=None) -> list[DayImpact]:
    """Impute each treated day's control outcome from its matched day."""
    y = np.asarray(outcomes)
    if len(y) != m.n_days:
        raise ValueError(f"{len(y)} outcomes for a {m.n_days}-day match map")
    if w is not None:
        missing = np.setdiff1d(np.flatnonzero(np.asarray(w).astype(bool)), m.treated)
        if missing.size:
            raise ValueError(f"treated day(s) {missing.tolist()} have no match")
    return [DayImpact(int(t), int(y[t]), int(y[c])) for t, c in zip(m.treated, m.control)]


def total_ad(day_impacts) -> int:
    return int(sum(d.ad for d in day_impacts))


def _nearest_within(scores, idx, i_pos, M):
    """Brute-force M nearest of position ``i_pos`` inside one group."""
    d = np.abs(scores - scores[i_pos])
    d[i_pos] = np.inf
    order = np.lexsort((idx, d))
    return idx[order[:M]]


def variance_neighbors(e_hat, w, M: int = 1) -> np.ndarray:
    """Indices of the ``M`` closest same-group days for every day.

    Closeness is ``|e_i - e_j|`` with ties to the earliest day.  Returns an
    ``n x M`` integer array.
    """
    s = np.asarray(e_hat, dtype=float)
    w = np.asarray(w).astype(bool)
    if M < 1:
        raise ValueError("M must be >= 1")
    out = np.empty((len(s), M), dtype=np.int64)
    for flag in (True, False):
        idx = np.flatnonzero(w == flag)
        if idx.size == 0:
            continue
        if idx.size <= M:
            label = "treated" if flag else "control"
            raise ValueError(f"{label} group has {idx.size} day(s); need more than M={M} for variance neighbours")
        order = np.lexsort((idx, s[idx]))
        idx_s, s_s = idx[order], s[idx][order]
        n = len(idx_s)
        for p in range(n):
            lo, hi = max(0, p - M), min(n, p + M + 1)
            win = np.r_[lo:p, p + 1:hi]
            d = np.abs(s_s[win] - s_s[p])
            pick = np.lexsort((idx_s[win], d))[:M]
            d_m = d[pick[-1]]
            outer = [q for q in (lo - 1, hi) if 0 <= q < n]
            if any(abs(s_s[q] - s_s[p]) == d_m for q in outer):
                out[idx_s[p]] = _nearest_within(s_s, idx_s, p, M)
            else:
                out[idx_s[p]] = idx_s[win[pick]]
    return out


def conditional_variance(outcomes, e_hat, w, M: int = 1, neighbors=None) -> np.ndarray:
    """Per-day outcome variance from each day and its ``M`` nearest same-group days.

    ``sigma2_i = (1/M) * sum over {i} + H(i) of (Y_j - mean)^2``; with M = 1
    this is ``(Y_i - Y_j)**2 / 2``.
    """
    y = np.asarray(outcomes, dtype=float)
    nb = variance_neighbors(e_hat, w, M) if neighbors is None else np.asarray(neighbors)
    M = nb.shape[1]
    group = np.column_stack([y, y[nb]])
    return ((group - group.mean(axis=1, keepdims=True)) ** 2).sum(axis=1) / M


def variance_ad(m: MatchMap, sigma2, w) -> float:
    """Matching variance of the attributable total.

    Treated days carry weight 1, control days ``K(i)**2``.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    w = np.asarray(w).astype(bool)
    if not np.isin(m.treated, np.flatnonzero(w)).all():
        raise ValueError("match map treated days disagree with the treatment vector")
    k = m.k
    weight = np.zeros(len(sigma2))
    weight[m.treated] = 1.0
    weight[~w] = k[~w].astype(float) ** 2
    return float(np.dot(weight, sigma2))


def ci(ad_hat: float, s2: float, level: float = 0.90) -> tuple[float, float]:
    """Normal-approximation interval ``ad_hat -/+ z * sqrt(s2)``."""
    if s2 < 0:
        raise ValueError("variance must be non-negative")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    half = stats.norm.ppf((1 + level) / 2) * math.sqrt(s2)
    return ad_hat - half, ad_hat + half


@dataclass(frozen=True)
class ImpactEstimate:
    cause: str
    age: str
    ad_hat: int
    s2: float
    ci_low: float
    ci_high: float
    level: float
    n_treated_used: int

    @property
    def stratum(self) -> str:
        return f"{self.cause}/{self.age}"


class ImpactTable:
    """Estimates for every cause x age cell, the marginals and the total."""

    def __init__(self, estimates, causes, ages, level):
        self.estimates = list(estimates)
        self.causes = list(causes)
        self.ages = list(ages)
        self.level = level
        self._by_key = {(e.cause, e.age): e for e in self.estimates}

    def get(self, cause: str = ALL, age: str = ALL) -> ImpactEstimate:
        return self._by_key[(cause, age)]

    @property
    def total(self) -> ImpactEstimate:
        return self.get(ALL, ALL)

    def __iter__(self):
        return iter(self.estimates)

    def __len__(self):
        return len(self.estimates)


def estimate_stratum(y, m: MatchMap, w, sigma2, cause=ALL, age=ALL, level=0.90) -> ImpactEstimate:
    y = np.asarray(y, dtype=np.int64)
    ad = int((y[m.treated] - y[m.control]).sum())
    s2 = variance_ad(m, sigma2, w) if len(m) else 0.0
    lo, hi = ci(ad, s2, level)
    return ImpactEstimate(cause, age, ad, s2, lo, hi, level, len(m))


def _strata(series: DailySeries):
    causes, ages = series.causes, series.ages
    keys = [(c, a) for c in causes for a in ages if (c, a) in series.outcomes]
    keys += [(c, ALL) for c in causes] + [(ALL, a) for a in ages] + [(ALL, ALL)]
    return causes, ages, keys


def _select(series, cause, age):
    return series.outcome(None if cause == ALL else cause, None if age == ALL else age)


def stratified_impact(series: DailySeries, m: MatchMap, e_hat, w, level: float = 0.90,
                      M: int = 1, used: MatchMap | None = None) -> ImpactTable:
    """Attributable counts for every stratum from one shared match map.

    ``used`` restricts the estimate to a subset of the pairs of ``m`` (as
    in the sensitivity analysis); conditional variances are always computed
    on the full sample.
    """
    if not series.has_outcomes:
        raise ValueError("series has no outcome columns")
    w = np.asarray(w).astype(bool)
    used = m if used is None else used
    nb = variance_neighbors(e_hat, w, M)
    causes, ages, keys = _strata(series)
    out = []
    for cause, age in keys:
        y = _select(series, cause, age)
        sigma2 = conditional_variance(y, e_hat, w, M, neighbors=nb)
        out.append(estimate_stratum(y, used, w, sigma2, cause, age, level))
    return ImpactTable(out, causes, ages, level)


def sensitivity_exclude(series: DailySeries, m: MatchMap, e_hat, w, flag, mode: str = "either",
                        level: float = 0.90, M: int = 1) -> ImpactTable:
    """Re-estimate without flagged days, keeping the original matches.

    ``mode="either"`` drops a pair when the treated day or its matched
    control is flagged; ``mode="treated"`` looks at the treated day only.
    """
    flag = np.asarray(flag).astype(bool)
    if mode == "either":
        keep = ~flag[m.treated] & ~flag[m.control]
    elif mode == "treated":
        keep = ~flag[m.treated]
    else:
        raise ValueError(f"unknown exclusion mode {mode!r}")
    if not keep.any():
        warnings.warn("every matched pair is excluded; attributable counts are 0", EmptyImpactWarning,
                      stacklevel=2)
    logger.info("sensitivity exclusion keeps %d of %d pairs", int(keep.sum()), len(m))
    return stratified_impact(series, m, e_hat, w, level, M, used=m.restrict(keep))
