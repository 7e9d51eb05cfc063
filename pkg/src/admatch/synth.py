"""Synthetic daily series with known potential outcomes.

Weather follows a seasonal cycle with autocorrelated noise; exposure is
log-linear in standardized temperature and humidity (scaled by
``confounding``) plus independent noise.  Control counts ``Y(0)`` are Poisson
with a seasonal, temperature- and influenza-dependent mean; ``Y(1)`` adds a
non-negative integer Poisson excess with mean ``tau`` per day, so the true
attributable total is an exact integer.

Replicate ``r`` of a batch started from ``seed`` uses ``seed + r``.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DailySeries, calendar_parts, lag_mean, outcome_column
from .errors import ValidationError

HOLIDAYS = ((1, 1), (1, 6), (4, 25), (5, 1), (6, 2), (8, 15), (11, 1), (12, 8), (12, 25), (12, 26))


@dataclass(frozen=True)
class SynthSpec:
    n_days: int = 1461
    start: str = "2003-01-01"
    threshold: float = 40.0
    exposure_lag: int = 2
    exposure_median: float = 42.0
    exposure_noise_sd: float = 0.45
    confounding: float = 0.5
    baseline_deaths: float = 30.0
    seasonal_amplitude: float = 0.12
    cold_effect: float = 0.01
    influenza_effect: float = 0.10
    tau: float = 1.0
    causes: dict = field(default_factory=lambda: {"cardiovascular": 0.33, "respiratory": 0.08, "other": 0.59})
    ages: dict = field(default_factory=lambda: {"15-64": 0.12, "65-74": 0.18, "75+": 0.70})

    def check(self) -> None:
        problems = []
        if self.n_days < 30:
            problems.append(f"n_days must be >= 30, got {self.n_days}")
        if self.threshold <= 0 or self.exposure_median <= 0:
            problems.append("threshold and exposure_median must be positive")
        if self.tau < 0:
            problems.append("tau must be non-negative")
        if self.confounding < 0:
            problems.append("confounding must be non-negative")
        if self.exposure_lag < 1:
            problems.append("exposure_lag must be >= 1")
        for label, shares in (("causes", self.causes), ("ages", self.ages)):
            if not shares or any(v <= 0 for v in shares.values()):
                problems.append(f"{label} shares must be positive")
            elif abs(sum(shares.values()) - 1) > 1e-9:
                problems.append(f"{label} shares must sum to 1")
            if any("." in k for k in shares):
                problems.append(f"{label} labels must not contain '.'")
        try:
            dt.date.fromisoformat(self.start)
        except ValueError:
            problems.append(f"start is not an ISO date: {self.start!r}")
        if problems:
            raise ValidationError("invalid synthetic spec", problems)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synth setting(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Oracle:
    y0: dict
    y1: dict
    w: np.ndarray
    spec: SynthSpec

    def observed(self, key) -> np.ndarray:
        return np.where(self.w, self.y1[key], self.y0[key])


def _ar1(rng, n, phi, sd):
    e = rng.normal(0.0, sd * np.sqrt(1 - phi ** 2), n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, sd)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + e[i]
    return out


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x * 0.0


def generate(spec: SynthSpec = SynthSpec(), seed: int = 0) -> tuple[DailySeries, Oracle]:
    spec.check()
    rng = np.random.default_rng(seed)
    n = spec.n_days
    dates = np.datetime64(spec.start, "D") + np.arange(n)
    month, day, _ = calendar_parts(dates)
    doy = (dates - dates.astype("datetime64[Y]")).astype(np.int64)
    season = np.cos(2 * np.pi * (doy - 20) / 365.25)  # +1 in mid-January

    temperature = 14.0 - 10.0 * season + _ar1(rng, n, 0.7, 2.5)
    temp_anom = temperature - (14.0 - 10.0 * season)
    humidity = np.clip(65.0 + 8.0 * season - 0.8 * temp_anom + rng.normal(0, 7, n), 5.0, 100.0)

    temp_lag = lag_mean(temperature, 4)
    drivers = -0.3 * _standardize(temp_lag) + 0.15 * _standardize(humidity)
    log_x = np.log(spec.exposure_median) + spec.confounding * drivers + _ar1(rng, n, 0.5, spec.exposure_noise_sd)
    exposure = np.exp(log_x)

    influenza = np.zeros(n, dtype=bool)
    years = np.unique(dates.astype("datetime64[Y]"))
    for y in years:
        onset = y + np.timedelta64(int(rng.integers(0, 45)), "D")
        length = int(rng.integers(21, 36))
        influenza |= (dates >= onset) & (dates < onset + np.timedelta64(length, "D"))
    holiday = np.zeros(n, dtype=bool)
    for mo, d in HOLIDAYS:
        holiday |= (month == mo) & (day == d)

    log_mu = (np.log(spec.baseline_deaths) + spec.seasonal_amplitude * season
              - spec.cold_effect * (temp_lag - temp_lag.mean()) + spec.influenza_effect * influenza)
    mu = np.exp(log_mu)

    w = lag_mean(exposure, spec.exposure_lag) >= spec.threshold
    y0, y1 = {}, {}
    for cause, cs in spec.causes.items():
        for age, as_ in spec.ages.items():
            key = (cause, age)
            share = cs * as_
            y0[key] = rng.poisson(mu * share)
            y1[key] = y0[key] + (rng.poisson(spec.tau * share, n) if spec.tau > 0 else 0)
    oracle = Oracle(y0=y0, y1=y1, w=w, spec=spec)
    series = DailySeries(
        dates=dates, exposure=exposure, temperature=temperature, humidity=humidity,
        influenza=influenza, holiday=holiday,
        outcomes={k: oracle.observed(k) for k in y0},
    )
    return series, oracle


def true_satt(oracle: Oracle, w=None, key=None) -> int:
    """Exact attributable total over treated days, from the stored potential outcomes."""
    w = oracle.w if w is None else np.asarray(w).astype(bool)
    keys = list(oracle.y0) if key is None else [key]
    return int(sum(int((oracle.y1[k][w] - oracle.y0[k][w]).sum()) for k in keys))


def naive_ad(y, w) -> float:
    """Difference-in-means total: ``n_treated * (mean treated - mean control)``."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w).astype(bool)
    return float(w.sum() * (y[w].mean() - y[~w].mean()))


def write_oracle(oracle: Oracle, dates, path) -> None:
    keys = sorted(oracle.y0)
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["date", "w"] + ["y0." + outcome_column(k)[2:] for k in keys]
                     + ["y1." + outcome_column(k)[2:] for k in keys])
        for i, d in enumerate(dates):
            out.writerow([str(d), int(oracle.w[i])] + [int(oracle.y0[k][i]) for k in keys]
                         + [int(oracle.y1[k][i]) for k in keys])
