"""Command line front end.

Subcommands: fit, predict, simulate, diagnose.  Exit codes: 0 success,
2 invalid input, 3 estimation failure, 4 numeric failure.  Outputs never
contain timestamps, so re-running a command with the same inputs writes
byte-identical files; the worker count for simulations comes from the
RTPR_THREADS environment variable and does not change results.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import io as rio
from .errors import EstimationError, InputError, NumericError, RtprError
from .estimate import FitOptions, fit
from .model import make_config
from .predict import OutlierRule, outlier_scores, predict_new
from .simulate import run_experiment, simulate_batch

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_ESTIMATION = 3
EXIT_NUMERIC = 4


def _parse_drop(tokens):
    drops = []
    for tok in tokens or []:
        parts = tok.split(":")
        if len(parts) != 2:
            raise InputError(f"--drop expects group:curve, got {tok!r}")
        try:
            drops.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise InputError(f"--drop expects integers, got {tok!r}") from exc
    return drops


def cmd_fit(args) -> int:
    run_cfg = rio.parse_run_config(args.config)
    data = rio.load_dataset(args.data)
    drops = _parse_drop(args.drop)
    for gid, cid in sorted(drops, key=lambda t: (t[0], -t[1])):
        data = data.drop_curve(gid - 1, cid - 1)
    seed = args.seed if args.seed is not None else run_cfg.seed
    config = make_config(run_cfg.model, data.I, nu0=run_cfg.nu0,
                         nu1=run_cfg.nu1, nu_mode=run_cfg.nu_mode)
    options = FitOptions(inner_tol=run_cfg.inner_tol, outer_tol=run_cfg.outer_tol,
                         max_inner=run_cfg.max_inner, max_outer=run_cfg.max_outer,
                         multi_start=run_cfg.multi_start, seed=seed,
                         init_beta=run_cfg.init_beta(data))
    result = fit(config, data, options)
    echo = dict(run_cfg.as_dict(), seed=seed, data=args.data,
                drop=",".join(f"{g}:{c}" for g, c in drops))
    rio.write_fit_artifact(result, args.out, run_config=echo)
    print(f"fit: model={run_cfg.model} groups={data.I} m={result.m_value:.6f} "
          f"-> {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    fit_result, echo = rio.load_fit_artifact(args.fit)
    if (args.grid is None) == (args.query is None):
        raise InputError("provide exactly one of --grid or --query")
    if args.grid is not None:
        if fit_result.data.p != 1:
            raise InputError("--grid only works with one covariate; use --query")
        Z = rio.parse_grid_spec(args.grid)[:, None]
        source = args.grid
    else:
        Z = rio.load_query(args.query)
        if Z.shape[1] != fit_result.data.p:
            raise InputError("query covariate dimension does not match the fit")
        source = args.query
    preds = [predict_new(fit_result, i, Z) for i in range(fit_result.data.I)]
    echo = dict(echo, query=source)
    rio.write_predictions(preds, args.out, echo=echo)
    print(f"predict: {Z.shape[0]} points x {fit_result.data.I} groups -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = rio.parse_sim_config(args.config)
    if args.reps is not None:
        if args.reps < 1:
            raise InputError("--reps must be >= 1")
        spec = replace(spec, base=replace(spec.base, reps=args.reps))
    seed = args.seed if args.seed is not None else spec.base.seed
    spec = replace(spec, base=replace(spec.base, seed=seed))
    scen_seeds = [int(s) for s in
                  np.random.SeedSequence(seed).generate_state(len(spec.scenarios))]
    models = [make_config(name, spec.base.I, nu0=spec.nu0, nu1=spec.nu1)
              for name in spec.models]
    results = []
    for row in range(len(spec.scenarios)):
        cfg = rio.scenario_config(spec, row, scen_seeds[row])
        results.append(run_experiment(cfg, models))
    echo = {k: v for k, v in (spec.raw or {}).items()}
    echo["seed"] = seed
    echo["reps"] = spec.base.reps
    rio.write_sim_results(spec, results, args.out, echo=echo)
    if spec.dump_data:
        cfg0 = rio.scenario_config(spec, 0, scen_seeds[0])
        rng = np.random.default_rng(np.random.SeedSequence(cfg0.seed).spawn(1)[0])
        data, truths, S, _, _ = simulate_batch(cfg0, rng)
        rio.save_dataset(data, args.out + ".data.csv")
        rio.write_truth(S, truths, args.out + ".truth.csv", echo=echo)
    total_fail = sum(len(r.failures) for r in results)
    print(f"simulate: {len(spec.scenarios)} scenarios x {spec.base.reps} reps, "
          f"{total_fail} failed fits -> {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    fit_result, echo = rio.load_fit_artifact(args.fit)
    rule = OutlierRule(c_mult=args.rule_mult)
    report = outlier_scores(fit_result, rule)
    echo = dict(echo, rule_mult=args.rule_mult)
    rio.write_outlier_report(report, args.out, echo=echo)
    n_flag = int(sum(f.sum() for f in report.flags))
    print(f"diagnose: {n_flag} flagged curves -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="rtpr",
        description="Robust process regression with extended t-process errors")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model to a dataset")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--out", required=True, help="output fit artifact (JSON)")
    p.add_argument("--drop", action="append", metavar="GROUP:CURVE",
                   help="leave out a curve (1-based ids, repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict from a fit artifact")
    p.add_argument("--fit", required=True, help="fit artifact from rtpr fit")
    p.add_argument("--grid", default=None, metavar="LO:HI:COUNT",
                   help="inline query grid (one covariate)")
    p.add_argument("--query", default=None, help="query points CSV")
    p.add_argument("--out", required=True, help="output prediction CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="run a simulation study")
    p.add_argument("--config", required=True, help="simulation configuration file")
    p.add_argument("--out", required=True, help="output results CSV")
    p.add_argument("--reps", type=int, default=None,
                   help="override the configured replication count")
    p.add_argument("--seed", type=int, default=None,
                   help="override the configured seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("diagnose", help="flag outlying curves from a fit")
    p.add_argument("--fit", required=True, help="fit artifact from rtpr fit")
    p.add_argument("--out", required=True, help="output report CSV")
    p.add_argument("--rule-mult", type=float, default=3.0,
                   help="median multiplier of the flagging rule (default 3)")
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RtprError as exc:
        # remaining package errors are misuse of the interface
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
