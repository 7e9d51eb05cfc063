"""Covariate design matrix and the propensity-score logistic model.

The design combines calendar and weather indicators with three smooth
blocks: a cubic regression spline in calendar time, and a tensor product of
two one-dimensional thin plate regression splines (lagged temperature and
humidity).  The propensity model is fitted by iteratively reweighted least
squares.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .core import DailySeries, IndicatorRules, TreatmentAssignment, derive_indicators, lag_mean
from .errors import NumericalError, RankDeficiencyError, ValidationError

logger = logging.getLogger(__name__)

SCORE_FLOOR = 1e-10
INTERCEPT = "(intercept)"
DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


class SeparationWarning(UserWarning):
    """Logistic fit drifted towards perfect separation."""


# -- design matrix -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    columns: tuple
    dropped: tuple = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2 or v.shape[1] != len(self.columns):
            raise ValueError(f"{v.shape} matrix does not match {len(self.columns)} column names")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def block(self, prefix: str) -> np.ndarray:
        idx = [j for j, c in enumerate(self.columns) if c.startswith(prefix)]
        return self.values[:, idx]

    def check(self) -> None:
        """Raise if the structural contract is violated."""
        v = self.values
        if not np.isfinite(v).all():
            raise ValidationError("design matrix has non-finite entries")
        if len(set(self.columns)) != len(self.columns):
            raise ValidationError("duplicated column names in design matrix")
        const = [c for j, c in enumerate(self.columns) if np.ptp(v[:, j]) == 0]
        if const != [INTERCEPT]:
            raise ValidationError(f"expected exactly one constant column ({INTERCEPT}), found {const}")
        _, first = np.unique(v, axis=1, return_index=True)
        if len(first) != v.shape[1]:
            raise ValidationError("design matrix has duplicated columns")


def rank_check(X, columns, rtol: float = 1e-9) -> None:
    """Raise :class:`RankDeficiencyError` naming the collinear columns."""
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=0)
    if (norms == 0).any():
        zero = [columns[j] for j in np.flatnonzero(norms == 0)]
        raise RankDeficiencyError(f"all-zero design column(s): {zero}", zero)
    Xs = X / norms
    _, R, piv = scipy.linalg.qr(Xs, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int((d > rtol * d[0]).sum())
    if rank == X.shape[1]:
        return
    kept = np.sort(piv[:rank])
    details = []
    bad = []
    for j in piv[rank:]:
        coef, *_ = np.linalg.lstsq(Xs[:, kept], Xs[:, j], rcond=None)
        partners = [columns[kept[i]] for i in np.flatnonzero(np.abs(coef) > 1e-6)]
        details.append(f"{columns[j]} ~ {partners}")
        bad.append(columns[j])
    raise RankDeficiencyError(
        f"design matrix has rank {rank} < {X.shape[1]} columns; collinear: " + "; ".join(details),
        bad,
    )


# -- calendar-time cubic regression spline -----------------------------------

class CubicRegressionSpline:
    """Natural cubic spline parametrised by its values at the knots.

    ``basis`` returns the cardinal functions (column j is 1 at knot j and 0
    at the other knots); each is piecewise cubic, C2 at the knots, with zero
    second derivative at both ends and linear continuation beyond them.
    ``design`` absorbs a sum-to-zero constraint so that the intercept is not
    in the column span.
    """

    def __init__(self, knots, constraint=None):
        k = np.asarray(knots, dtype=float)
        if k.ndim != 1 or len(k) < 3 or (np.diff(k) <= 0).any():
            raise ValueError("need at least 3 strictly increasing knots")
        self.knots = k
        h = np.diff(k)
        m = len(k)
        D = np.zeros((m - 2, m))
        B = np.zeros((m - 2, m - 2))
        for i in range(m - 2):
            D[i, i] = 1 / h[i]
            D[i, i + 1] = -1 / h[i] - 1 / h[i + 1]
            D[i, i + 2] = 1 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3
            if i + 1 < m - 2:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6
        # F maps knot values to knot second derivatives.
        self._F = np.vstack([np.zeros(m), np.linalg.solve(B, D), np.zeros(m)])
        self.constraint = constraint

    @classmethod
    def from_data(cls, t, df: int) -> "CubicRegressionSpline":
        t = np.asarray(t, dtype=float)
        u = np.unique(t)
        if df < 2:
            raise ValueError(f"df must be >= 2, got {df}")
        if len(u) < df + 1:
            raise ValueError(f"df={df} needs at least {df + 1} distinct values, got {len(u)}")
        knots = np.quantile(u, np.linspace(0, 1, df + 1))
        spline = cls(knots)
        X = spline.basis(t)
        # Null space of the column sums: Householder QR of the constraint.
        q, _ = np.linalg.qr(X.sum(axis=0)[:, None], mode="complete")
        spline.constraint = q[:, 1:]
        return spline

    @property
    def df(self) -> int:
        return len(self.knots) - 1

    def basis(self, x, deriv: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k, F = self.knots, self._F
        m = len(k)
        j = np.clip(np.searchsorted(k, x, side="right") - 1, 0, m - 2)
        h = (k[j + 1] - k[j])[:, None]
        a = (k[j + 1] - x)[:, None]
        b = (x - k[j])[:, None]
        out = np.zeros((len(x), m))
        rows = np.arange(len(x))
        Fj, Fj1 = F[j], F[j + 1]
        if deriv == 0:
            out[rows, j] += (a / h)[:, 0]
            out[rows, j + 1] += (b / h)[:, 0]
            out += Fj * (a ** 3 / h - h * a) / 6 + Fj1 * (b ** 3 / h - h * b) / 6
        elif deriv == 1:
            out[rows, j] -= (1 / h)[:, 0]
            out[rows, j + 1] += (1 / h)[:, 0]
            out += Fj * (-3 * a ** 2 / h + h) / 6 + Fj1 * (3 * b ** 2 / h - h) / 6
        elif deriv == 2:
            out += Fj * (a / h) + Fj1 * (b / h)
        else:
            raise ValueError("deriv must be 0, 1 or 2")
        lo, hi = x < k[0], x > k[-1]
        if lo.any() or hi.any():
            # Linear continuation outside the knot range.
            for mask, edge in ((lo, k[0]), (hi, k[-1])):
                if not mask.any():
                    continue
                e = np.array([edge])
                v0, v1 = self.basis(e, 0)[0], self.basis(e, 1)[0]
                if deriv == 0:
                    out[mask] = v0 + (x[mask] - edge)[:, None] * v1
                elif deriv == 1:
                    out[mask] = v1
                else:
                    out[mask] = 0.0
        return out

    def design(self, x, deriv: int = 0) -> np.ndarray:
        X = self.basis(x, deriv)
        return X if self.constraint is None else X @ self.constraint


def cubic_spline_basis(t, df_per_year: float = 5, n_years: float | None = None) -> np.ndarray:
    """Calendar-time cubic regression spline with ``df_per_year`` per year.

    ``t`` is a day index; ``n_years`` defaults to the span of ``t`` in years.
    Returns ``round(df_per_year * n_years)`` columns, intercept excluded.
    """
    t = np.asarray(t, dtype=float)
    if (np.diff(t) <= 0).any():
        raise ValueError("time index must be strictly increasing")
    if n_years is None:
        n_years = (t[-1] - t[0] + 1) / 365.25
    df = int(round(df_per_year * n_years))
    if df < 3:
        raise ValueError(f"spline needs df >= 3, got {df} ({df_per_year} per year x {n_years:.3g} years)")
    return CubicRegressionSpline.from_data(t, df).design(t)


# -- thin plate regression splines --------------------------------------------

class ThinPlateSpline1D:
    """Low-rank thin plate regression spline for one covariate.

    The radial kernel ``|x - x'|**3`` is evaluated between knots (the unique
    observed values, thinned to ``max_knots`` quantiles when there are more)
    and eigendecomposed.  The ``k - 2`` eigenvectors of largest absolute
    eigenvalue, scaled by their eigenvalues, give the wiggly columns; the
    polynomial null space ``{1, x}`` completes a basis of dimension ``k``.
    """

    def __init__(self, x, k: int, max_knots: int | None = None):
        x = np.asarray(x, dtype=float)
        if k < 3:
            raise ValueError(f"basis dimension must be >= 3, got {k}")
        u = np.unique(x)
        if len(u) < k:
            raise ValueError(f"basis dimension {k} needs at least {k} distinct values, got {len(u)}")
        if max_knots is not None and len(u) > max_knots:
            u = u[np.unique(np.round(np.linspace(0, len(u) - 1, max_knots)).astype(int))]
        self.k = k
        # The kernel is translation invariant, so rescaling only the spread
        # leaves the span unchanged and keeps the linear column proportional to x.
        self.scale = float(u[-1] - u[0])
        self.knots = u / self.scale
        E = np.abs(self.knots[:, None] - self.knots[None, :]) ** 3
        lam, U = np.linalg.eigh(E)
        order = np.argsort(-np.abs(lam), kind="stable")[: k - 2]
        Uk = U[:, order]
        # Deterministic eigenvector signs.
        pivot = Uk[np.argmax(np.abs(Uk), axis=0), np.arange(k - 2)]
        self._radial = Uk * np.where(pivot < 0, -1.0, 1.0)
        self.eigenvalues = lam[order]

    def design(self, x, include_constant: bool = False) -> np.ndarray:
        xs = np.asarray(x, dtype=float) / self.scale
        E = np.abs(xs[:, None] - self.knots[None, :]) ** 3
        cols = [E @ self._radial]
        if include_constant:
            cols.append(np.ones((len(xs), 1)))
        cols.append(xs[:, None])
        return np.hstack(cols)

    def names(self, label: str, include_constant: bool = False) -> list[str]:
        names = [f"{label}.s{i + 1}" for i in range(self.k - 2)]
        if include_constant:
            names.append(f"{label}.1")
        return names + [f"{label}.x"]


def tprs_basis(x, k: int, include_constant: bool = False, max_knots: int | None = None) -> np.ndarray:
    """Thin plate regression spline basis of dimension ``k`` for one covariate.

    By default the constant column is dropped (``k - 1`` columns returned);
    ``include_constant=True`` returns all ``k``.
    """
    return ThinPlateSpline1D(x, k, max_knots=max_knots).design(x, include_constant)


def tensor_basis(A, B) -> np.ndarray:
    """Row-wise Kronecker product; column ``i * q + j`` is ``A[:, i] * B[:, j]``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"row mismatch: {A.shape} vs {B.shape}")
    n = A.shape[0]
    return (A[:, :, None] * B[:, None, :]).reshape(n, A.shape[1] * B.shape[1])


def tensor_names(a_names, b_names) -> list[str]:
    return [f"{a}*{b}" for a in a_names for b in b_names]


# -- assembly ------------------------------------------------------------------

@dataclass(frozen=True)
class DesignSpec:
    spline_df_per_year: float = 5
    temperature_basis_dim: int = 5
    humidity_basis_dim: int = 3
    temperature_lag: int = 4
    holiday_by_season: bool = True
    max_knots: int = 500
    drop_constant_indicators: bool = True
    rules: IndicatorRules = field(default_factory=IndicatorRules)


def assemble_design(series: DailySeries, assignment: TreatmentAssignment | None = None,
                    spec: DesignSpec = DesignSpec()) -> DesignMatrix:
    """Build the propensity-model design for a validated series.

    Column blocks, in order: intercept; warm-season indicator; day-of-week
    dummies (Monday baseline) within warm and cold season; holiday (by season
    unless ``holiday_by_season`` is off); influenza; heat (> heat threshold);
    July-August; calendar-time spline; temperature x humidity tensor smooth.
    """
    n = len(series)
    if assignment is not None and len(assignment.w) != n:
        raise ValidationError(f"assignment has {len(assignment.w)} days, series has {n}")
    ind = derive_indicators(series, spec.rules)
    warm = ind.warm_season.astype(float)
    cold = 1.0 - warm

    cols: list[np.ndarray] = [np.ones(n), warm]
    names: list[str] = [INTERCEPT, "warm_season"]
    indicator_names = {"warm_season"}
    for season, s in (("warm", warm), ("cold", cold)):
        for d in range(1, 7):
            cols.append((ind.day_of_week == d) * s)
            names.append(f"dow_{DAY_NAMES[d]}:{season}")
    hol = series.holiday.astype(float)
    if spec.holiday_by_season:
        cols += [hol * warm, hol * cold]
        names += ["holiday:warm", "holiday:cold"]
    else:
        cols.append(hol)
        names.append("holiday")
    cols += [series.influenza.astype(float), ind.heat.astype(float), ind.july_august.astype(float)]
    names += ["influenza", "heat", "july_august"]
    indicator_names.update(names[2:])

    keep_cols, keep_names, dropped = [], [], []
    for c, nm in zip(cols, names):
        if nm != INTERCEPT and np.ptp(c) == 0 and nm in indicator_names:
            if not spec.drop_constant_indicators:
                raise RankDeficiencyError(f"indicator column {nm!r} is constant", [nm])
            dropped.append(nm)
            continue
        keep_cols.append(np.asarray(c, dtype=float))
        keep_names.append(nm)
    if dropped:
        logger.warning("dropped constant indicator column(s): %s", ", ".join(dropped))

    t = (series.dates - series.dates[0]).astype(np.int64).astype(float)
    n_years = (t[-1] - t[0] + 1) / 365.25
    df = int(round(spec.spline_df_per_year * n_years))
    if df < 3:
        raise ValidationError(f"series too short for a calendar spline ({n} days gives df={df})")
    time_spline = CubicRegressionSpline.from_data(t, df)
    S = time_spline.design(t)
    keep_cols.extend(S.T)
    keep_names += [f"time.s{i + 1}" for i in range(S.shape[1])]

    temp = lag_mean(series.temperature, spec.temperature_lag)
    tp_t = ThinPlateSpline1D(temp, spec.temperature_basis_dim, spec.max_knots)
    tp_h = ThinPlateSpline1D(series.humidity, spec.humidity_basis_dim, spec.max_knots)
    Tt = tp_t.design(temp, include_constant=True)
    Th = tp_h.design(series.humidity, include_constant=True)
    te = tensor_basis(Tt, Th)
    te_names = tensor_names(tp_t.names("temp", True), tp_h.names("hum", True))
    const = te_names.index("temp.1*hum.1")
    keep_cols.extend(np.delete(te, const, axis=1).T)
    keep_names += [f"te({nm})" for i, nm in enumerate(te_names) if i != const]

    X = np.column_stack(keep_cols)
    rank_check(X, keep_names)
    dm = DesignMatrix(X, tuple(keep_names), tuple(dropped))
    dm.check()
    return dm


# -- logistic regression by IRLS ---------------------------------------------

@dataclass(frozen=True, eq=False)
class PropensityFit:
    beta: np.ndarray
    e_hat: np.ndarray
    deviance: float
    converged: bool
    n_iter: int
    columns: tuple = ()
    linear_predictor: np.ndarray | None = None
    deviance_path: tuple = ()


def _as_matrix(Z):
    if isinstance(Z, DesignMatrix):
        return Z.values, Z.columns
    X = np.asarray(Z, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, tuple(f"x{j}" for j in range(X.shape[1]))


def binomial_deviance(w, eta) -> float:
    """-2 log-likelihood of 0/1 outcomes ``w`` under logits ``eta``."""
    w = np.asarray(w, dtype=float)
    return float(2 * np.sum(np.logaddexp(0.0, eta) - w * eta))


def fit_logistic_irls(w, Z, tol: float = 1e-8, max_iter: int = 100,
                      separation_eta: float = 30.0) -> PropensityFit:
    """Maximum likelihood logistic regression by IRLS.

    Stops when the deviance changes by less than ``tol`` or after
    ``max_iter`` iterations.  A step that increases the deviance is halved
    (up to 30 times).  If any final linear predictor exceeds
    ``separation_eta`` in absolute value the fit is returned with
    ``converged=False`` and a :class:`SeparationWarning`.
    """
    X, columns = _as_matrix(Z)
    y = np.asarray(w).astype(float)
    if y.shape[0] != X.shape[0]:
        raise ValidationError(f"{y.shape[0]} outcomes for {X.shape[0]} design rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("treatment vector must be binary")
    if y.min() == y.max():
        raise ValidationError("treatment vector has a single class; cannot fit a propensity model")
    rank_check(X, columns)

    beta = np.zeros(X.shape[1])
    eta = np.zeros(X.shape[0])
    dev = binomial_deviance(y, eta)
    path = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        v = np.maximum(mu * (1 - mu), 1e-300)
        z = eta + (y - mu) / v
        sw = np.sqrt(v)
        new_beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        new_eta = X @ new_beta
        new_dev = binomial_deviance(y, new_eta)
        halvings = 0
        while not new_dev <= dev and halvings < 30:
            new_beta = (beta + new_beta) / 2
            new_eta = X @ new_beta
            new_dev = binomial_deviance(y, new_eta)
            halvings += 1
        if not new_dev <= dev:
            if new_dev - dev <= 1e-9 * (1 + dev):
                # Already at the optimum up to rounding.
                converged = True
                break
            raise NumericalError(f"IRLS could not decrease the deviance at iteration {it}")
        change = dev - new_dev
        beta, eta, dev = new_beta, new_eta, new_dev
        path.append(dev)
        if change < tol:
            converged = True
            break
    separated = bool(np.abs(eta).max() > separation_eta)
    if separated:
        converged = False
        warnings.warn(
            f"linear predictor exceeded {separation_eta} in absolute value; "
            "treatment looks (quasi-)separated by the covariates",
            SeparationWarning, stacklevel=2)
    elif not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", SeparationWarning, stacklevel=2)
    e_hat = np.clip(expit(eta), SCORE_FLOOR, 1 - SCORE_FLOOR)
    return PropensityFit(beta=beta, e_hat=e_hat, deviance=dev, converged=converged, n_iter=it,
                         columns=columns, linear_predictor=eta, deviance_path=tuple(path))


def predict_propensity(fit: PropensityFit, Z) -> np.ndarray:
    """Inverse-logit of the linear predictor, clamped to [1e-10, 1 - 1e-10]."""
    X, columns = _as_matrix(Z)
    if isinstance(Z, DesignMatrix) and fit.columns and tuple(columns) != tuple(fit.columns):
        raise ValueError("design columns do not match the fitted model")
    if X.shape[1] != len(fit.beta):
        raise ValueError(f"design has {X.shape[1]} columns, model has {len(fit.beta)} coefficients")
    return np.clip(expit(X @ fit.beta), SCORE_FLOOR, 1 - SCORE_FLOOR)
