"""Command line entry point: ``admatch <stage> [options]``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .core import treatment_from_series, write_series
from .errors import NumericalError, ValidationError
from .synth import generate, true_satt, write_oracle

log = logging.getLogger("admatch")


def _config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    changes = {}
    if getattr(args, "input", None):
        changes["input"] = args.input
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    if getattr(args, "threshold", None) is not None:
        changes["threshold"] = args.threshold
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
        cfg.check()
    return cfg


def cmd_ingest_check(args) -> int:
    cfg = _config(args)
    series = pl.load_outcomes(cfg)
    a = treatment_from_series(series, cfg.threshold, cfg.exposure_lag)
    print(f"{cfg.input}: {len(series)} days, {series.dates[0]} .. {series.dates[-1]}")
    print(f"outcome strata: {len(series.strata)} ({len(series.causes)} causes x {len(series.ages)} ages)")
    print(f"treated days (lagged exposure >= {cfg.threshold:g}): {a.n_treated}; control days: {a.n_control}")
    return 0


def _outdir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_design(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    res = pl.design_phase(pl.load_covariates(cfg), cfg)
    pl.write_design(res, cfg, out)
    print(f"propensity model: {len(res.fit.beta)} coefficients, converged={res.fit.converged}, "
          f"deviance={res.fit.deviance:.4f}")
    return 0


def cmd_match(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    m = pl.match_phase(pl.read_design(out), cfg, out)
    print(f"matched {len(m)} treated days to {int((m.k > 0).sum())} distinct control days")
    return 0


def cmd_balance(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    res = pl.read_design(out)
    m = pl.load_matches(res, out)
    rows = pl.balance_phase(pl.load_covariates(cfg), res, m, cfg, out)
    for r in rows:
        print(f"{r.covariate:<18} p_pre={pl.fmt_p(r.p_pre):<8} p_post={pl.fmt_p(r.p_post):<8} "
              f"delta_pre={pl.fmt_delta(r.delta_pre):<7} delta_post={pl.fmt_delta(r.delta_post)}")
    return 0


def cmd_impact(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg)
    res = pl.read_design(out)
    m = pl.load_matches(res, out)
    table, _ = pl.impact_phase(pl.load_outcomes(cfg), res, m, cfg, out)
    print((out / "impact_table.txt").read_text(), end="")
    return 0


def cmd_all(args) -> int:
    cfg = _config(args)
    result = pl.run_all(cfg)
    print((Path(cfg.output_dir) / "impact_table.txt").read_text(), end="")
    t = result["impact"].total
    log.info("total AD %d (%.0f, %.0f)", t.ad_hat, t.ci_low, t.ci_high)
    return 0


def cmd_synth(args) -> int:
    cfg = pl.RunConfig.load(args.config) if args.config else pl.RunConfig()
    spec = cfg.synth
    changes = {k: v for k, v in (("n_days", args.days), ("tau", args.tau), ("confounding", args.confounding))
               if v is not None}
    if changes:
        spec = dataclasses.replace(spec, **changes)
    seed = cfg.seed if args.seed is None else args.seed
    series, oracle = generate(spec, seed)
    write_series(series, args.out)
    if args.oracle:
        write_oracle(oracle, series.dates, args.oracle)
    print(f"wrote {len(series)} days to {args.out} (seed {seed}); true attributable total {true_satt(oracle)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="admatch", description="Attributable counts by propensity-score matching.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--input", help="daily input file (overrides config)")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--threshold", type=float, help="exposure threshold (overrides config)")
        sp.set_defaults(func=func)
        return sp

    stage("ingest-check", cmd_ingest_check, "validate an input file")
    stage("design", cmd_design, "fit the propensity model")
    stage("match", cmd_match, "nearest-neighbour matching on the fitted scores")
    stage("balance", cmd_balance, "balance diagnostics for the matched sample")
    stage("impact", cmd_impact, "attributable counts, intervals and sensitivity table")
    stage("all", cmd_all, "run every stage in order")

    sp = sub.add_parser("synth", help="generate a synthetic series with known potential outcomes")
    sp.add_argument("--config", help="JSON run configuration (its 'synth' section is used)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--days", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--confounding", type=float)
    sp.add_argument("--out", required=True, help="output data file")
    sp.add_argument("--oracle", help="also write the potential outcomes here")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
