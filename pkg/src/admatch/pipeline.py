"""Run configuration and the file-based stages behind the CLI.

Stages and the fixed-name artifacts they write into the output directory:

design
    ``propensity.csv`` (date, lagged exposure, treatment, linear predictor,
    score) and ``propensity_fit.json``.
match
    ``matches.csv`` (treated_date, control_date), ``overlap.json``,
    ``plot_match_multiplicity.csv``.
balance
    ``balance_table.csv``, ``balance_table.json``, ``plot_densities.csv``,
    ``plot_month_distribution.csv``.
impact
    ``impact_table.csv``/``.txt``/``.json``, ``sensitivity_table.csv``/
    ``.txt``/``.json``, ``plot_daily_series.csv``.

Only the impact stage reads outcome columns.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import balance as bal
from .core import (DailySeries, GapPolicy, IndicatorRules, derive_indicators, lag_mean, read_series,
                   treatment_from_series, validate)
from .design import DesignSpec, PropensityFit, assemble_design, fit_logistic_irls
from .errors import ValidationError
from .impact import ALL, ImpactTable, impute_and_diff, sensitivity_exclude, stratified_impact
from .matching import MatchMap, match_multiplicity, nn_match, overlap_check, read_matches, write_matches
from .synth import SynthSpec

logger = logging.getLogger(__name__)

PROPENSITY_FILE = "propensity.csv"
FIT_FILE = "propensity_fit.json"
MATCH_FILE = "matches.csv"


@dataclass(frozen=True)
class RunConfig:
    input: str | None = None
    output_dir: str = "admatch-out"
    threshold: float = 40.0
    exposure_lag: int = 2
    temperature_lag: int = 4
    ci_level: float = 0.90
    sensitivity_flag: str = "influenza"
    sensitivity_mode: str = "either"
    match_scale: str = "probability"
    caliper_warn: float = 0.1
    variance_matches: int = 1
    seed: int = 0
    gap_policy: GapPolicy = field(default_factory=GapPolicy)
    design: DesignSpec = field(default_factory=DesignSpec)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def check(self) -> None:
        problems = []
        if self.threshold <= 0:
            problems.append("threshold must be positive")
        if self.exposure_lag < 1 or self.temperature_lag < 1:
            problems.append("lag windows must be >= 1")
        if not 0 < self.ci_level < 1:
            problems.append("ci_level must be in (0, 1)")
        if self.sensitivity_flag not in ("influenza", "holiday"):
            problems.append("sensitivity_flag must be 'influenza' or 'holiday'")
        if self.sensitivity_mode not in ("either", "treated"):
            problems.append("sensitivity_mode must be 'either' or 'treated'")
        if self.match_scale not in ("probability", "logit"):
            problems.append("match_scale must be 'probability' or 'logit'")
        if self.variance_matches < 1:
            problems.append("variance_matches must be >= 1")
        if problems:
            raise ValidationError("invalid run configuration", problems)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown configuration key(s): {sorted(unknown)}")
        try:
            if "gap_policy" in d:
                d["gap_policy"] = GapPolicy(**d["gap_policy"])
            if "design" in d:
                spec = dict(d["design"])
                if "rules" in spec:
                    rules = dict(spec["rules"])
                    rules = {k: tuple(v) if isinstance(v, list) else v for k, v in rules.items()}
                    spec["rules"] = IndicatorRules(**rules)
                d["design"] = DesignSpec(**spec)
            if "synth" in d:
                d["synth"] = SynthSpec.from_dict(d["synth"])
            cfg = cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad configuration: {exc}") from None
        if cfg.temperature_lag != cfg.design.temperature_lag:
            cfg = dataclasses.replace(cfg, design=dataclasses.replace(cfg.design, temperature_lag=cfg.temperature_lag))
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- formatting ----------------------------------------------------------------

def _num(x):
    """Full-precision value for machine-readable output."""
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def round_int(x: float) -> int:
    return int(math.floor(x + 0.5))


def fmt_p(p: float) -> str:
    return "" if math.isnan(p) else f"{p:.3g}"


def fmt_delta(d: float) -> str:
    return "" if math.isnan(d) else f"{d:.3f}"


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        out.writerows(rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n")


# -- stage helpers -------------------------------------------------------------

def load_covariates(cfg: RunConfig) -> DailySeries:
    """Input series for the design phase: outcome columns are not read."""
    if not cfg.input:
        raise ValidationError("no input file configured")
    return validate(read_series(cfg.input, outcomes=False), cfg.gap_policy)


def load_outcomes(cfg: RunConfig) -> DailySeries:
    if not cfg.input:
        raise ValidationError("no input file configured")
    return validate(read_series(cfg.input, outcomes=True), cfg.gap_policy)


@dataclass(frozen=True, eq=False)
class DesignResult:
    dates: list
    x_lagged: np.ndarray
    w: np.ndarray
    fit: PropensityFit

    @property
    def e_hat(self) -> np.ndarray:
        return self.fit.e_hat

    @property
    def linear_predictor(self) -> np.ndarray:
        return self.fit.linear_predictor


def design_phase(series: DailySeries, cfg: RunConfig) -> DesignResult:
    assignment = treatment_from_series(series, cfg.threshold, cfg.exposure_lag)
    if assignment.n_treated == 0:
        raise ValidationError(f"no treated days: lagged exposure never reaches {cfg.threshold}")
    if assignment.n_control == 0:
        raise ValidationError(f"no control days: lagged exposure is always >= {cfg.threshold}")
    Z = assemble_design(series, assignment, cfg.design)
    fit = fit_logistic_irls(assignment.w, Z)
    return DesignResult(series.date_strings(), assignment.x_lagged, assignment.w, fit)


def matching_scores(e_hat, linear_predictor, scale: str) -> np.ndarray:
    if scale == "logit":
        return np.asarray(linear_predictor, dtype=float)
    return np.asarray(e_hat, dtype=float)


def write_design(res: DesignResult, cfg: RunConfig, out: Path) -> None:
    rows = [[d, repr(float(x)), int(w), repr(float(eta)), repr(float(e))]
            for d, x, w, eta, e in zip(res.dates, res.x_lagged, res.w, res.linear_predictor, res.e_hat)]
    _write_csv(out / PROPENSITY_FILE, ["date", "x_lagged", "w", "linear_predictor", "e_hat"], rows)
    fit = res.fit
    _write_json(out / FIT_FILE, {
        "threshold": cfg.threshold,
        "exposure_lag": cfg.exposure_lag,
        "n_days": len(res.dates),
        "n_treated": int(res.w.sum()),
        "n_control": int((~res.w).sum()),
        "converged": bool(fit.converged),
        "n_iter": int(fit.n_iter),
        "deviance": _num(fit.deviance),
        "coefficients": {c: _num(b) for c, b in zip(fit.columns, fit.beta)},
    })


def read_design(out: Path) -> DesignResult:
    path = out / PROPENSITY_FILE
    if not path.exists():
        raise ValidationError(f"{path} not found; run the design stage first")
    dates, x, w, eta, e = [], [], [], [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["date", "x_lagged", "w", "linear_predictor", "e_hat"]:
            raise ValidationError(f"{path}: unexpected header")
        for row in reader:
            dates.append(row[0])
            x.append(float(row[1]))
            w.append(row[2] == "1")
            eta.append(float(row[3]))
            e.append(float(row[4]))
    meta = json.loads((out / FIT_FILE).read_text()) if (out / FIT_FILE).exists() else {}
    fit = PropensityFit(beta=np.array(list(meta.get("coefficients", {}).values()), dtype=float),
                        e_hat=np.array(e), deviance=meta.get("deviance", math.nan),
                        converged=meta.get("converged", True), n_iter=meta.get("n_iter", 0),
                        columns=tuple(meta.get("coefficients", {})), linear_predictor=np.array(eta))
    return DesignResult(dates, np.array(x), np.array(w, dtype=bool), fit)


def _check_dates(series: DailySeries, res: DesignResult):
    if series.date_strings() != list(res.dates):
        raise ValidationError("input dates differ from the design-stage artifacts; rerun design")


def match_phase(res: DesignResult, cfg: RunConfig, out: Path) -> MatchMap:
    scores = matching_scores(res.e_hat, res.linear_predictor, cfg.match_scale)
    m = nn_match(scores, res.w)
    write_matches(m, res.dates, out / MATCH_FILE)
    ov = overlap_check(res.e_hat, res.w, cfg.caliper_warn)
    if ov.n_flagged:
        logger.warning("%d treated day(s) farther than %.3g from any control score", ov.n_flagged, cfg.caliper_warn)
    treated_dates = [res.dates[i] for i in np.flatnonzero(res.w)]
    _write_json(out / "overlap.json", {
        **ov.summary(),
        "flagged_days": [d for d, f in zip(treated_dates, ov.flagged) if f],
        "outside_support_days": [d for d, f in zip(treated_dates, ov.outside_support) if f],
    })
    hist = match_multiplicity(m, int((~res.w).sum()))
    _write_csv(out / "plot_match_multiplicity.csv", ["times_selected", "n_control_days"],
               [[k, v] for k, v in hist.items()])
    return m


def load_matches(res: DesignResult, out: Path) -> MatchMap:
    path = out / MATCH_FILE
    if not path.exists():
        raise ValidationError(f"{path} not found; run the match stage first")
    m = read_matches(path, res.dates)
    if not np.array_equal(m.treated, np.flatnonzero(res.w)):
        raise ValidationError(f"{path} does not cover exactly the treated days of {PROPENSITY_FILE}")
    return m


def report_covariates(series: DailySeries, cfg: RunConfig) -> list:
    ind = derive_indicators(series, cfg.design.rules)
    return [
        bal.Covariate("temperature_lag", lag_mean(series.temperature, cfg.temperature_lag)),
        bal.Covariate("humidity", series.humidity),
        bal.Covariate("weekend", ind.weekend.astype(float), "binary"),
        bal.Covariate("month", ind.month, "month"),
        bal.Covariate("influenza", series.influenza.astype(float), "binary"),
        bal.Covariate("heat", ind.heat.astype(float), "binary"),
        bal.Covariate("warm_season", ind.warm_season.astype(float), "binary"),
    ]


def _density(values, weights, grid):
    values = np.asarray(values, dtype=float)
    if len(np.unique(values)) < 2:
        return [math.nan] * len(grid)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            kde = stats.gaussian_kde(values, weights=weights)
        except (np.linalg.LinAlgError, ValueError):
            return [math.nan] * len(grid)
    return kde(grid).tolist()


def balance_phase(series: DailySeries, res: DesignResult, m: MatchMap, cfg: RunConfig, out: Path):
    _check_dates(series, res)
    covs = report_covariates(series, cfg)
    rows = bal.balance_table(res.e_hat, res.w, m, covs)
    header = ["covariate", "treated", "control", "matched", "p_pre", "p_post",
              "delta_pre", "delta_post", "pct_bias"]
    display = []
    for r in rows:
        mean = (lambda v: "" if math.isnan(v) else f"{v:.3f}")
        display.append([r.covariate, mean(r.treated), mean(r.control), mean(r.matched),
                        fmt_p(r.p_pre), fmt_p(r.p_post), fmt_delta(r.delta_pre), fmt_delta(r.delta_post),
                        "" if math.isnan(r.pct_bias) else f"{r.pct_bias:.1f}"])
    _write_csv(out / "balance_table.csv", header, display)
    _write_json(out / "balance_table.json",
                [{k: (_num(v) if not isinstance(v, str) else v) for k, v in r.as_dict().items()} for r in rows])

    w = res.w
    k = m.k
    grids = {"propensity_score": np.linspace(0, 1, 101)}
    values = {"propensity_score": res.e_hat}
    for c in covs[:2]:
        lo, hi = float(np.min(c.values)), float(np.max(c.values))
        grids[c.name] = np.linspace(lo, hi, 101)
        values[c.name] = np.asarray(c.values, dtype=float)
    dens_rows = []
    for name, grid in grids.items():
        x = values[name]
        t = _density(x[w], None, grid)
        c = _density(x[~w], None, grid)
        mm = _density(x[k > 0], k[k > 0].astype(float), grid)
        dens_rows += [[name, repr(float(g)), repr(a), repr(b), repr(d)] for g, a, b, d in zip(grid, t, c, mm)]
    _write_csv(out / "plot_densities.csv", ["variable", "x", "treated", "control", "matched"], dens_rows)

    month = derive_indicators(series, cfg.design.rules).month
    _write_csv(out / "plot_month_distribution.csv", ["month", "treated", "control", "matched"],
               [[mo, int((w & (month == mo)).sum()), int((~w & (month == mo)).sum()),
                 int(k[month == mo].sum())] for mo in range(1, 13)])
    return rows


def _impact_json(table: ImpactTable) -> list:
    return [{"cause": e.cause, "age": e.age, "ad": e.ad_hat, "s2": _num(e.s2), "ci_low": _num(e.ci_low),
             "ci_high": _num(e.ci_high), "level": e.level, "n_treated_used": e.n_treated_used}
            for e in table]


def _impact_rows(table: ImpactTable):
    ages = table.ages + [ALL]
    header = ["cause"]
    for a in ages:
        header += [f"{a}:AD", f"{a}:ci_low", f"{a}:ci_high"]
    rows = []
    for cause in table.causes + [ALL]:
        row = [cause]
        for a in ages:
            e = table.get(cause, a)
            row += [e.ad_hat, round_int(e.ci_low), round_int(e.ci_high)]
        rows.append(row)
    return header, rows


def _impact_text(table: ImpactTable, title: str) -> str:
    ages = table.ages + [ALL]
    pct = f"{table.level * 100:g}% CI"
    width = 22
    lines = [title, ""]
    lines.append(f"{'':<24}" + "".join(f"{('age ' + a if a != ALL else 'all ages'):<{width}}" for a in ages))
    lines.append(f"{'':<24}" + "".join(f"{'AD  (' + pct + ')':<{width}}" for _ in ages))
    for cause in table.causes + [ALL]:
        cells = []
        for a in ages:
            e = table.get(cause, a)
            cells.append(f"{f'{e.ad_hat} ({round_int(e.ci_low)}, {round_int(e.ci_high)})':<{width}}")
        label = "all causes" if cause == ALL else cause
        lines.append(f"{label:<24}" + "".join(cells))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def write_impact(table: ImpactTable, out: Path, stem: str, title: str) -> None:
    header, rows = _impact_rows(table)
    _write_csv(out / f"{stem}.csv", header, rows)
    (out / f"{stem}.txt").write_text(_impact_text(table, title))
    _write_json(out / f"{stem}.json", _impact_json(table))


def impact_phase(series: DailySeries, res: DesignResult, m: MatchMap, cfg: RunConfig, out: Path):
    _check_dates(series, res)
    table = stratified_impact(series, m, res.e_hat, res.w, cfg.ci_level, cfg.variance_matches)
    write_impact(table, out, "impact_table", "Attributable counts by cause and age")
    flag = getattr(series, cfg.sensitivity_flag)
    sens = sensitivity_exclude(series, m, res.e_hat, res.w, flag, cfg.sensitivity_mode,
                               cfg.ci_level, cfg.variance_matches)
    write_impact(sens, out, "sensitivity_table",
                 f"Attributable counts by cause and age, excluding {cfg.sensitivity_flag} days")

    y = series.outcome()
    ad = {d.day: d.ad for d in impute_and_diff(y, m, res.w)}
    _write_csv(out / "plot_daily_series.csv", ["date", "x_lagged", "w", "deaths", "ad"],
               [[d, repr(float(x)), int(wi), int(yi), ad.get(i, "")]
                for i, (d, x, wi, yi) in enumerate(zip(res.dates, res.x_lagged, res.w, y))])
    return table, sens


def run_all(cfg: RunConfig) -> dict:
    """Whole pipeline; every design artifact is written before outcomes are read."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    covariates = load_covariates(cfg)
    res = design_phase(covariates, cfg)
    write_design(res, cfg, out)
    m = match_phase(res, cfg, out)
    balance_phase(covariates, res, m, cfg, out)
    series = load_outcomes(cfg)
    table, sens = impact_phase(series, res, m, cfg, out)
    return {"design": res, "matches": m, "impact": table, "sensitivity": sens}
