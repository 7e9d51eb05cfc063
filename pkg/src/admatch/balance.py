"""Covariate balance before and after matching."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .matching import MatchMap

TWO_PI = 2 * math.pi


class BalanceWarning(UserWarning):
    pass


def _split(x, w):
    x = np.asarray(x, dtype=float)
    w = np.asarray(w).astype(bool)
    if x.shape != w.shape:
        raise ValueError("covariate and treatment vector differ in length")
    return x[w], x[~w]


def _pooled_sd(xt, xc) -> float:
    if len(xt) < 2 or len(xc) < 2:
        raise ValueError("standardized difference needs at least 2 observations per group")
    return math.sqrt((np.var(xt, ddof=1) + np.var(xc, ddof=1)) / 2)


def std_diff_pre(x, w) -> float:
    """Standardized mean difference, treated minus control.

    Returns NaN (with a :class:`BalanceWarning`) when the pooled variance is 0.
    """
    xt, xc = _split(x, w)
    sd = _pooled_sd(xt, xc)
    if sd == 0:
        warnings.warn("zero pooled variance; standardized difference undefined", BalanceWarning, stacklevel=2)
        return math.nan
    return float((xt.mean() - xc.mean()) / sd)


def std_diff_post(x, w, m: MatchMap) -> float:
    """Treated minus matched-control mean over the pre-matching pooled SD.

    Matched controls enter with their multiplicity.
    """
    xt, xc = _split(x, w)
    sd = _pooled_sd(xt, xc)
    if sd == 0:
        warnings.warn("zero pooled variance; standardized difference undefined", BalanceWarning, stacklevel=2)
        return math.nan
    xm = np.asarray(x, dtype=float)[m.control]
    return float((xt.mean() - xm.mean()) / sd)


def pct_bias(delta_pre: float, delta_post: float) -> float:
    """Percent bias reduction, ``100 * (pre - post) / pre``; NaN when pre is 0."""
    if delta_pre == 0 or math.isnan(delta_pre) or math.isnan(delta_post):
        return math.nan
    # Written as 1 - ratio so that a zero post value gives exactly 100.
    return 100.0 * (1.0 - delta_post / delta_pre)


def welch_t(a, b) -> float:
    """Two-sided p-value of Welch's unequal-variance t test."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("Welch test needs at least 2 observations per group")
    diff = a.mean() - b.mean()
    va, vb = np.var(a, ddof=1) / len(a), np.var(b, ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0:
        return 1.0 if diff == 0 else 0.0
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    return float(min(1.0, 2 * stats.t.sf(abs(t), df)))


def prop_test(count_a: int, n_a: int, count_b: int, n_b: int) -> float:
    """Two-sided pooled two-proportion z test, no continuity correction."""
    if n_a < 1 or n_b < 1:
        raise ValueError("group sizes must be >= 1")
    if not (0 <= count_a <= n_a and 0 <= count_b <= n_b):
        raise ValueError("counts must lie in [0, n]")
    pa, pb = count_a / n_a, count_b / n_b
    pooled = (count_a + count_b) / (n_a + n_b)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n_a + 1 / n_b))
    if se == 0:
        return 1.0
    z = (pa - pb) / se
    return float(min(1.0, 2 * stats.norm.sf(abs(z))))


# -- circular medians ----------------------------------------------------------

def month_to_angle(month) -> np.ndarray:
    """Mid-month angle in radians, month 1..12."""
    return TWO_PI * (np.asarray(month, dtype=float) - 0.5) / 12


def _arc(a, b):
    """Unsigned angular distance in [0, pi]."""
    return np.abs((np.asarray(a) - np.asarray(b) + math.pi) % TWO_PI - math.pi)


def circular_median(angles, tol: float = 1e-9) -> float:
    """Angle minimising the mean arc distance to the data.

    The minimiser is attained at a data point or an antipode.  Ties are
    resolved towards the mean direction (then the smallest angle), which keeps
    the choice rotation-equivariant whenever the mean direction is defined.
    """
    a = np.mod(np.asarray(angles, dtype=float), TWO_PI)
    if a.size == 0:
        raise ValueError("no angles")
    u, counts = np.unique(a, return_counts=True)
    cand = np.unique(np.mod(np.concatenate([u, u + math.pi]), TWO_PI))
    cost = (_arc(cand[:, None], u[None, :]) * counts).sum(axis=1) / a.size
    best = cand[cost <= cost.min() + tol]
    if len(best) == 1:
        return float(best[0])
    resultant = np.exp(1j * a).mean()
    if abs(resultant) > 1e-9:
        return float(best[np.argmin(_arc(best, np.angle(resultant)))])
    return float(best[0])


@dataclass(frozen=True)
class CircularTestResult:
    statistic: float
    p_value: float
    median: float
    table: tuple
    degenerate: bool


def circular_median_test(angles_by_group, tol: float = 1e-9) -> CircularTestResult:
    """Common-median test for two or more samples of angles.

    Counts, per group, the observations in the half-circle
    ``(median, median + pi]`` of the pooled circular median and applies a
    Pearson chi-square test with ``g - 1`` degrees of freedom to the
    resulting 2 x g table.
    """
    groups = [np.mod(np.asarray(g, dtype=float), TWO_PI) for g in angles_by_group]
    if len(groups) < 2 or any(len(g) == 0 for g in groups):
        raise ValueError("need at least two non-empty groups")
    med = circular_median(np.concatenate(groups), tol)
    above, below = [], []
    degenerate = False
    for g in groups:
        r = np.mod(g - med, TWO_PI)
        at_median = (r < tol) | (r > TWO_PI - tol)
        inside = ~at_median & (r <= math.pi + tol)
        degenerate |= bool(at_median.all())
        above.append(int(inside.sum()))
        below.append(int(len(g) - inside.sum()))
    table = np.array([above, below], dtype=float)
    rows, cols = table.sum(axis=1), table.sum(axis=0)
    if (rows == 0).any():
        return CircularTestResult(0.0, 1.0, med, (tuple(above), tuple(below)), True)
    expected = np.outer(rows, cols) / table.sum()
    stat = float(((table - expected) ** 2 / expected).sum())
    p = float(stats.chi2.sf(stat, len(groups) - 1))
    return CircularTestResult(stat, p, med, (tuple(above), tuple(below)), degenerate)


# -- balance report -------------------------------------------------------------

@dataclass(frozen=True)
class Covariate:
    name: str
    values: np.ndarray
    kind: str = "continuous"  # continuous | binary | month

    def __post_init__(self):
        if self.kind not in ("continuous", "binary", "month"):
            raise ValueError(f"unknown covariate kind {self.kind!r}")


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    kind: str
    treated: float
    control: float
    matched: float
    p_pre: float
    p_post: float
    delta_pre: float
    delta_post: float
    pct_bias: float

    def as_dict(self) -> dict:
        return asdict(self)


def balance_row(cov: Covariate, w, m: MatchMap) -> BalanceRow:
    x = np.asarray(cov.values, dtype=float)
    w = np.asarray(w).astype(bool)
    xt, xc, xm = x[w], x[~w], x[m.control]
    if cov.kind == "month":
        ang = month_to_angle
        p_pre = circular_median_test([ang(xt), ang(xc)]).p_value
        p_post = circular_median_test([ang(xt), ang(xm)]).p_value
        nan = math.nan
        return BalanceRow(cov.name, cov.kind, nan, nan, nan, p_pre, p_post, nan, nan, nan)
    if cov.kind == "binary":
        p_pre = prop_test(int(xt.sum()), len(xt), int(xc.sum()), len(xc))
        p_post = prop_test(int(xt.sum()), len(xt), int(xm.sum()), len(xm))
    else:
        p_pre = welch_t(xt, xc)
        p_post = welch_t(xt, xm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BalanceWarning)
        d_pre = std_diff_pre(x, w)
        d_post = std_diff_post(x, w, m)
    return BalanceRow(
        cov.name, cov.kind, float(xt.mean()), float(xc.mean()), float(xm.mean()),
        p_pre, p_post, d_pre, d_post, pct_bias(abs(d_pre), abs(d_post)),
    )


def balance_table(e_hat, w, m: MatchMap, covariates) -> list[BalanceRow]:
    """Balance rows: the estimated propensity score first, then ``covariates``.

    ``pct_bias`` is the percent reduction in the magnitude of the
    standardized difference.
    """
    rows = [balance_row(Covariate("propensity_score", np.asarray(e_hat, dtype=float)), w, m)]
    for cov in covariates:
        if cov.name == "propensity_score":
            continue
        rows.append(balance_row(cov, w, m))
    return rows
