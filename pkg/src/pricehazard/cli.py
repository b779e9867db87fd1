"""Command-line entry point: ``pricehazard <subcommand> ...``.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad value)
  3  missing input file
  4  schema or data error (bad header, empty dataset, bad config)
  5  numerical failure (fit diverged, non-finite likelihood)
  6  cold start (user or item unknown to the model)

On failure a single JSON line ``{"error": ..., "message": ..., "exit_code": ...}``
is written to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np
import pandas as pd

from . import __version__
from .core import ModelSpec, Variant, split_by_time
from .estimator import MixedHazardModel
from .evaluate import DEFAULT_PERCENTILES, evaluate_models, write_report_csvs
from .exceptions import (ColdStartError, EmptyDatasetError, FitDivergedError, NumericError,
                         SchemaError, SimulationError)
from .infer import FitConfig
from .ingest import (build_event_log, parse_generic_events, parse_online_retail,
                     read_event_log, write_event_log, write_statistics_csv)
from .predict import DEFAULT_DEADLINES, teacher_forced_targets, expected_return_times, write_predictions
from .sim import random_params, recovery_experiment, simulate_events, write_params

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_MISSING, EXIT_DATA, EXIT_NUMERIC, EXIT_COLD = 0, 1, 2, 3, 4, 5, 6

log = logging.getLogger("pricehazard")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, EXIT_USAGE)
        sys.exit(EXIT_USAGE)


def _emit_error(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code}) + "\n")


# --- helpers -----------------------------------------------------------------

ESTIMATOR_KEYS = {"iterations", "learning_rate", "mc_samples", "kappa_prior_shape", "kappa_prior_rate",
                  "w_step_std", "theta_bound", "excite_bound", "sigma", "learn_sigma", "tolerance",
                  "horizon_days", "precursor_cap", "time_bucket_days", "method"}
CONFIG_KEYS = {f.name for f in fields(FitConfig)} | ESTIMATOR_KEYS


def load_config(path) -> dict:
    """Read a flat TOML file of FitConfig fields (plus method, precursor_cap,
    time_bucket_days)."""
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        try:
            cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise SchemaError(f"{path}: {e}") from None
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise SchemaError(f"{path}: unknown config keys {unknown}", unknown)
    nested = [k for k, v in cfg.items() if isinstance(v, dict)]
    if nested:
        raise SchemaError(f"{path}: config must be flat, found tables {nested}", nested)
    if cfg.get("precursor_cap", 1) == 0:
        cfg["precursor_cap"] = None  # 0 means unlimited
    return cfg


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, inputs, config=None, seed=None) -> None:
    manifest = {
        "command": command,
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "config": config or {},
        "seed": seed,
        "version": __version__,
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _deadlines(text):
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad deadline list {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise UsageError("deadlines must be a non-empty list of positive integers")
    return vals


# --- subcommands -------------------------------------------------------------

def cmd_ingest(args):
    _require(args.input)
    parse = parse_online_retail if args.format == "online-retail" else parse_generic_events
    records = parse(args.input)
    if sum(records.skipped.values()):
        log.info("skipped rows: %s", dict(records.skipped))
    full = build_event_log(records, args.window_start, args.window_end, args.min_degree)
    outputs = {}
    if args.split_at is not None:
        cutoff = (pd.Timestamp(args.split_at) - pd.Timestamp(args.window_start)) / pd.Timedelta(days=1)
        train, test = split_by_time(full, cutoff)
        write_event_log(train, args.out)
        test_out = args.test_out or os.path.splitext(args.out)[0] + ".test.csv"
        write_event_log(test, test_out)
        outputs["test"] = test_out
    else:
        write_event_log(full, args.out)
    if args.stats_out:
        write_statistics_csv(full, args.stats_out)
    write_manifest(args.out + ".manifest.json", "ingest", [args.input],
                   {k: v for k, v in vars(args).items() if k != "func"})
    print(json.dumps({"users": full.n_users, "items": full.n_items, "purchases": len(full),
                      "skipped": dict(records.skipped), **outputs}, sort_keys=True))


def _estimator_params(cfg: dict, args) -> dict:
    params = {k: v for k, v in cfg.items() if k in ESTIMATOR_KEYS}
    if "seed" in cfg:
        params["random_state"] = cfg["seed"]
    for flag in ("iterations", "learning_rate", "mc_samples", "method", "precursor_cap"):
        val = getattr(args, flag, None)
        if val is not None:
            params[flag] = val
    if args.seed is not None:
        params["random_state"] = args.seed
    return params


def cmd_fit(args):
    _require(args.log)
    cfg = load_config(args.config)
    train = read_event_log(args.log)
    params = _estimator_params(cfg, args)
    model = MixedHazardModel(variant=Variant.parse(args.variant).value, **params)
    model.fit(train)
    model.save(args.out)
    inputs = [args.log] + ([args.config] if args.config else [])
    write_manifest(args.out + ".manifest.json", "fit", inputs, model.get_params(), model.random_state)
    print(json.dumps({"model": args.out, "iterations": model.n_iter_, "converged": model.converged_}))


def cmd_predict(args):
    deadlines = _deadlines(args.deadlines)
    _require(args.model)
    _require(args.test)
    model = MixedHazardModel.load(args.model)
    tr = model.train_
    test = read_event_log(args.test, tr.user_ids, tr.item_ids)
    targets = teacher_forced_targets(model.fitted_, test, same_item=args.same_item)
    rows = []
    for td in deadlines:
        exp_days = expected_return_times(model.fitted_, targets.users, targets.items, targets.anchors, td)[0]
        for u, o, e, d in zip(targets.users, targets.items, exp_days, targets.durations):
            rows.append((tr.user_ids[u], tr.item_ids[o], td, float(e), float(d)))
    write_predictions(args.out, rows)
    write_manifest(args.out + ".manifest.json", "predict", [args.model, args.test],
                   {"deadlines": deadlines, "same_item": args.same_item})


def cmd_eval(args):
    deadlines = _deadlines(args.deadlines)
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise UsageError("--models needs at least one checkpoint")
    for p in paths + [args.test]:
        _require(p)
    fitted = {}
    ref_ids = None
    test = None
    for p in paths:
        m = MixedHazardModel.load(p)
        ids = (m.train_.user_ids, m.train_.item_ids)
        if ref_ids is None:
            ref_ids = ids
            test = read_event_log(args.test, *ids)
        elif ids != ref_ids:
            raise SchemaError(f"{p} was trained on a different log than {paths[0]}")
        name = m.spec_.variant.value
        if name in fitted:
            raise SchemaError(f"two checkpoints for variant {name}")
        fitted[name] = m.fitted_
    reports = evaluate_models(fitted, test, deadlines, DEFAULT_PERCENTILES, args.max_order,
                              args.truth_mode, args.same_item)
    write_report_csvs(reports, args.out_dir)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "eval", paths + [args.test],
                   {"deadlines": deadlines, "max_order": args.max_order, "truth_mode": args.truth_mode,
                    "same_item": args.same_item})


def cmd_simulate(args):
    spec = ModelSpec(Variant.parse(args.variant), args.precursor_cap, args.time_bucket_days)
    truth = random_params(spec, args.n_users, args.n_items, args.horizon, seed=args.seed)
    sim = simulate_events(spec, truth, args.n_users, args.n_items, args.horizon, seed=args.seed + 1)
    start = pd.Timestamp(args.start_date)
    stamps = start + pd.to_timedelta(sim.times, unit="D")
    pd.DataFrame({"user": [f"u{u}" for u in sim.users], "item": [f"i{o}" for o in sim.items],
                  "timestamp": stamps.strftime("%Y-%m-%dT%H:%M:%S.%fZ"),
                  "price": [repr(float(p)) for p in sim.prices]}).to_csv(args.out, index=False)
    params_out = args.params_out or os.path.splitext(args.out)[0] + ".params.json"
    write_params(truth, params_out)
    write_manifest(args.out + ".manifest.json", "simulate", [],
                   {k: v for k, v in vars(args).items() if k != "func"}, args.seed)
    print(json.dumps({"events": len(sim), "params": params_out}))


def cmd_recover(args):
    cfg = load_config(args.config)
    spec = ModelSpec(Variant.parse(args.variant), cfg.get("precursor_cap", 100), cfg.get("time_bucket_days", 7))
    fit_cfg = {k: v for k, v in cfg.items() if k in {f.name for f in fields(FitConfig)}}
    fit_cfg["seed"] = args.seed
    if args.iterations is not None:
        fit_cfg["iterations"] = args.iterations
    res = recovery_experiment(spec, (args.n_users, args.n_items, args.horizon), seed=args.seed,
                              config=FitConfig(**fit_cfg), method=cfg.get("method", "advi"))
    out = {"variant": spec.variant.value, "n_events": res["n_events"], "spearman": res["spearman"],
           "iterations": res["fit"].n_iter}
    text = json.dumps(out, sort_keys=True, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        write_manifest(args.out + ".manifest.json", "recover", [args.config] if args.config else [],
                       fit_cfg, args.seed)
    print(text)


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pricehazard", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap on BLAS/OpenMP worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="parse a CSV into an event log")
    s.add_argument("--format", choices=["online-retail", "generic"], required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--window-start", required=True)
    s.add_argument("--window-end", required=True)
    s.add_argument("--min-degree", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--split-at", default=None, help="date; write train to --out and test to --test-out")
    s.add_argument("--test-out", default=None)
    s.add_argument("--stats-out", default=None, help="dataset statistics CSV")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("fit", parents=[common], help="fit one variant to a training log")
    s.add_argument("--log", required=True)
    s.add_argument("--variant", required=True, type=str.lower,
                   choices=[v.value.lower() for v in Variant])
    s.add_argument("--config", default=None, help="flat TOML file of fit settings")
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=["advi", "map"], default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    s.add_argument("--mc-samples", dest="mc_samples", type=int, default=None)
    s.add_argument("--precursor-cap", dest="precursor_cap", type=int, default=None)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="expected return times for a test log")
    s.add_argument("--model", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--deadlines", default=",".join(map(str, DEFAULT_DEADLINES)))
    s.add_argument("--out", required=True)
    s.add_argument("--same-item", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", parents=[common], help="write the evaluation report CSVs")
    s.add_argument("--models", required=True, help="comma-separated checkpoints")
    s.add_argument("--test", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--deadlines", default=",".join(map(str, DEFAULT_DEADLINES)))
    s.add_argument("--max-order", type=int, default=5)
    s.add_argument("--truth-mode", choices=["cap", "drop"], default="cap")
    s.add_argument("--same-item", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", parents=[common], help="simulate a generic event CSV from random parameters")
    s.add_argument("--variant", default="mhme", type=str.lower, choices=[v.value.lower() for v in Variant])
    s.add_argument("--n-users", type=int, default=200)
    s.add_argument("--n-items", type=int, default=50)
    s.add_argument("--horizon", type=float, default=365.0)
    s.add_argument("--precursor-cap", type=int, default=100)
    s.add_argument("--time-bucket-days", type=int, default=7)
    s.add_argument("--start-date", default="2013-01-01")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--params-out", default=None)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("recover", parents=[common], help="simulate, refit and report rank correlations")
    s.add_argument("--variant", default="mhme", type=str.lower, choices=[v.value.lower() for v in Variant])
    s.add_argument("--n-users", type=int, default=200)
    s.add_argument("--n-items", type=int, default=50)
    s.add_argument("--horizon", type=float, default=365.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_recover)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as e:
        _emit_error("UsageError", e, EXIT_USAGE)
        return EXIT_USAGE
    except FileNotFoundError as e:
        _emit_error("FileNotFoundError", e, EXIT_MISSING)
        return EXIT_MISSING
    except ColdStartError as e:
        _emit_error("ColdStartError", e, EXIT_COLD)
        return EXIT_COLD
    except (FitDivergedError, NumericError, SimulationError) as e:
        _emit_error(type(e).__name__, e, EXIT_NUMERIC)
        return EXIT_NUMERIC
    except (SchemaError, EmptyDatasetError, ValueError, TypeError, KeyError) as e:
        _emit_error(type(e).__name__, e, EXIT_DATA)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover
        _emit_error(type(e).__name__, e, EXIT_INTERNAL)
        return EXIT_INTERNAL
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
