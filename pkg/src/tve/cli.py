"""Command-line interface.

Subcommands: ``simulate`` (scenario grids), ``estimate`` (one CSV),
``resample`` (positivity-filtered subsampling of one CSV) and ``report``
(merge per-rep tables). Exit codes: 0 success, 1 runtime or statistical
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import itertools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._accel import numba_enabled
from .data import DgdSpec, load_csv, resample_filtered, Rejected
from .errors import ConfigError, EmptyDataError, InputError, InvalidSizeError, SchemaError, ScenarioError, TveError
from .learners import G_BOUNDS, Q_BOUNDS, LearnerSpec
from .montecarlo import (
    ESTIMATORS,
    ScenarioConfig,
    per_rep_columns,
    rep_seed,
    run_scenario,
    summarize,
    summarize_table,
)
from .pipeline import estimate
from .variance import D_EPS, MAX_ITER

log = logging.getLogger("tve")

CONFIG_VERSION = 1
FLOAT_FORMAT = "%.17g"

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
_USAGE_ERRORS = (ConfigError, SchemaError, InvalidSizeError, EmptyDataError, InputError, FileNotFoundError)

CONFIG_DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "reps": 500,
    "level": 0.95,
    "dgd": ["simple"],
    "beta_p": [-2.0],
    "beta_psi": [0.0],
    "n": [1000],
    "estimators": list(ESTIMATORS),
    "learner": {},
    "d_eps": D_EPS,
    "max_iter": MAX_ITER,
    "g_bounds": list(G_BOUNDS),
    "q_bounds": list(Q_BOUNDS),
}


# --------------------------------------------------------------------------
# config and manifest


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def load_config(source):
    """Parse and validate a scenario-grid config (path or dict).

    Returns the config with defaults filled in. Unknown keys, a missing or
    wrong ``version`` and out-of-range values raise `ConfigError`.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        try:
            raw = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    cfg = {**CONFIG_DEFAULTS, **raw}
    for key in ("dgd", "beta_p", "beta_psi", "n"):
        cfg[key] = _as_list(cfg[key])
        if not cfg[key]:
            raise ConfigError(f"{key} must list at least one value")
    try:
        cfg["dgd"] = [DgdSpec(k).kind.value for k in cfg["dgd"]]
        cfg["beta_p"] = [float(v) for v in cfg["beta_p"]]
        cfg["beta_psi"] = [float(v) for v in cfg["beta_psi"]]
        cfg["n"] = [int(v) for v in cfg["n"]]
        cfg["seed"] = int(cfg["seed"])
        cfg["reps"] = int(cfg["reps"])
        cfg["level"] = float(cfg["level"])
        cfg["d_eps"] = float(cfg["d_eps"])
        cfg["max_iter"] = int(cfg["max_iter"])
        cfg["estimators"] = list(cfg["estimators"])
        cfg["g_bounds"] = [float(v) for v in cfg["g_bounds"]]
        cfg["q_bounds"] = [float(v) for v in cfg["q_bounds"]]
        learner = LearnerSpec.from_dict(cfg["learner"])
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    for b in ("g_bounds", "q_bounds"):
        lo, hi = cfg[b]
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError(f"{b} must satisfy 0 < lo < hi < 1")
    list(scenario_cells(cfg, learner))  # validates reps, level, estimators, d_eps
    return cfg


def scenario_cells(cfg, learner=None):
    """One `ScenarioConfig` per grid cell, in a fixed order."""
    learner = learner or LearnerSpec.from_dict(cfg["learner"])
    for kind, n, bpsi, bp in itertools.product(cfg["dgd"], cfg["n"], cfg["beta_psi"], cfg["beta_p"]):
        yield ScenarioConfig(
            dgd=DgdSpec(kind, bp, bpsi),
            n=n,
            reps=cfg["reps"],
            seed=cfg["seed"],
            learner=learner,
            level=cfg["level"],
            estimators=tuple(cfg["estimators"]),
            d_eps=cfg["d_eps"],
            max_iter=cfg["max_iter"],
            g_bounds=tuple(cfg["g_bounds"]),
            q_bounds=tuple(cfg["q_bounds"]),
        )


def config_digest(cfg):
    """sha256 of the canonical JSON form."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode("ascii")).hexdigest()


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def run_manifest(cfg, seed, started, **extra):
    """Everything needed to reproduce an output besides the input data."""
    return {
        "tool": "tve",
        "version": __version__,
        "config_digest": config_digest(cfg),
        "config": cfg,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "defaults": {
            "d_eps": D_EPS,
            "max_iter": MAX_ITER,
            "g_bounds": list(G_BOUNDS),
            "q_bounds": list(Q_BOUNDS),
            "folds": LearnerSpec().folds,
            "numba": numba_enabled(),
        },
        **extra,
    }


def _write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_csv(df, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


# --------------------------------------------------------------------------
# commands


def cmd_simulate(config_path, out_dir, jobs=1, seed=None):
    """Run every cell of a config grid.

    Writes ``per_rep.csv``, ``summary.csv`` and ``manifest.json`` into
    ``out_dir``. A cell whose replications all fail is listed under
    ``failed_cells`` in the manifest and the exit code is 1.
    """
    started = _now()
    cfg = load_config(config_path)
    if seed is not None:
        cfg["seed"] = int(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables, results, failed = [], [], []
    for cell in scenario_cells(cfg):
        label = f"{cell.dgd.kind.value}/bp={cell.dgd.beta_p:g}/bpsi={cell.dgd.beta_psi:g}/n={cell.n}"
        log.info("running %s (%d reps)", label, cell.reps)
        try:
            res = run_scenario(cell, jobs=jobs)
        except ScenarioError as exc:
            log.error("%s: %s", label, exc)
            failed.append(label)
            continue
        results.append(res)
        tables.append(res.table)
    per_rep = pd.concat(tables, ignore_index=True) if tables else pd.DataFrame(columns=per_rep_columns())
    _write_csv(per_rep, out / "per_rep.csv")
    summary = summarize(results) if results else pd.DataFrame()
    _write_csv(summary, out / "summary.csv")
    oracles = [
        {
            "dgd": r.config.dgd.kind.value,
            "beta_p": r.config.dgd.beta_p,
            "beta_psi": r.config.dgd.beta_psi,
            "n": r.config.n,
            "psi_truth": r.psi_truth,
            "sigma2_quadrature": r.oracle.quadrature,
            "sigma2_mc_scaled": r.oracle.mc_scaled,
            "sigma2_mc_raw": r.oracle.mc_raw,
            "sigma2_mc_se": r.oracle.mc_se,
        }
        for r in results
    ]
    _write_json(run_manifest(cfg, cfg["seed"], started, jobs=jobs, failed_cells=failed, oracles=oracles),
                out / "manifest.json")
    return EXIT_RUNTIME if failed else EXIT_OK


def _learner_from_args(args):
    return LearnerSpec(folds=args.folds, misspecify_q=args.misspecify_q)


def cmd_estimate(data_path, treatment, outcome, covariates, out_path, seed=0, level=0.95, learner=None):
    """Estimate on one CSV and write a JSON report."""
    started = _now()
    d = load_csv(data_path, treatment, outcome, covariates)
    learner = learner or LearnerSpec()
    rep = estimate(d, learner, seed=seed, level=level)
    cfg = {"data": str(data_path), "treatment": treatment, "outcome": outcome, "covariates": list(d.names),
           "seed": seed, "level": level, "learner": learner.to_dict()}
    body = rep.to_dict()
    body["n_dropped"] = d.meta.get("n_dropped", 0)
    body["manifest"] = run_manifest(cfg, seed, started)
    if out_path in (None, "-"):
        sys.stdout.write(json.dumps(body, indent=2, sort_keys=True, default=_json_default) + "\n")
    else:
        _write_json(body, out_path)
    return EXIT_OK


RESAMPLE_COLUMNS = ["attempt", "seed_stream", "trunc_proportion", "psi_hat"] + [
    f"sigma2_{e}" for e in ESTIMATORS
] + ["steps_os", "term_os", "steps_it", "term_it"]


def cmd_resample(data_path, treatment, outcome, covariates, m, attempts, out_dir, seed=0,
                 trunc_level=None, min_prop=0.01, learner=None):
    """Positivity-filtered subsampling followed by estimation on each accepted draw."""
    started = _now()
    source = load_csv(data_path, treatment, outcome, covariates)
    learner = learner or LearnerSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, proportions, reasons = [], [], {}
    for k in range(attempts):
        s = rep_seed(seed, k)
        sub = resample_filtered(source, m, trunc_level, min_prop, learner, seed=s)
        if isinstance(sub, Rejected):
            proportions.append(sub.proportion)
            reasons[sub.reason] = reasons.get(sub.reason, 0) + 1
            continue
        proportions.append(sub.meta["trunc_proportion"])
        try:
            rep = estimate(sub, learner, seed=s)
        except TveError as exc:
            reasons[type(exc).__name__] = reasons.get(type(exc).__name__, 0) + 1
            continue
        v = rep.variance
        rows.append({
            "attempt": k,
            "seed_stream": s,
            "trunc_proportion": sub.meta["trunc_proportion"],
            "psi_hat": rep.psi_hat,
            **{f"sigma2_{e}": rep.sigma2[e] for e in ESTIMATORS},
            "steps_os": v.onestep_trace.steps,
            "term_os": v.onestep_trace.termination.value,
            "steps_it": v.iterative_trace.steps,
            "term_it": v.iterative_trace.termination.value,
        })
    _write_csv(pd.DataFrame(rows, columns=RESAMPLE_COLUMNS), out / "resample.csv")
    finite = np.array([p for p in proportions if np.isfinite(p)])
    counts, edges = np.histogram(finite, bins=10, range=(0.0, max(0.1, float(finite.max()) if finite.size else 0.1)))
    histogram = {"edges": edges.tolist(), "counts": counts.tolist()}
    cfg = {"data": str(data_path), "m": m, "attempts": attempts, "seed": seed, "trunc_level": trunc_level,
           "min_prop": min_prop, "learner": learner.to_dict()}
    _write_json(run_manifest(cfg, seed, started, attempts=attempts, accepted=len(rows),
                             rejected=attempts - len(rows), rejection_reasons=reasons,
                             proportion_histogram=histogram), out / "manifest.json")
    if not rows:
        sys.stderr.write(f"no subsample accepted in {attempts} attempts; truncation-proportion histogram:\n")
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            sys.stderr.write(f"  [{lo:.4f}, {hi:.4f}) {c}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(in_paths, out_path):
    """Merge per-rep tables from ``simulate`` into one summary CSV."""
    frames = []
    expected = per_rep_columns()
    for p in in_paths:
        df = pd.read_csv(p, keep_default_na=False, na_values=[""], float_precision="round_trip")
        if list(df.columns) != expected:
            raise SchemaError(f"{p}: columns do not match the per-rep schema")
        df["failed_reason"] = df["failed_reason"].fillna("").astype(str)
        frames.append(df)
    table = pd.concat(frames, ignore_index=True)
    keys = ["dgd", "beta_p", "beta_psi", "n", "rep", "seed_stream"]
    dup = table.duplicated(keys, keep=False)
    if dup.any():
        listing = table.loc[dup, keys].drop_duplicates().to_string(index=False)
        raise SchemaError(f"duplicate replications across inputs:\n{listing}")
    _write_csv(summarize_table(table), out_path)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _default_jobs():
    try:
        return max(1, int(os.environ.get("TVE_JOBS", "1")))
    except ValueError:
        return 1


def build_parser():
    p = argparse.ArgumentParser(prog="tve", description="TMLE of log(CRR) and targeted variance estimation")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario grid from a JSON config")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--jobs", type=int, default=_default_jobs(), help="worker processes (default: $TVE_JOBS or 1)")
    s.add_argument("--seed", type=int, default=None, help="override the config seed")

    def data_args(sp):
        sp.add_argument("data")
        sp.add_argument("--treatment", required=True)
        sp.add_argument("--outcome", required=True)
        sp.add_argument("--covariates", default=None, help="comma-separated (default: all other columns)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--folds", type=int, default=10)
        sp.add_argument("--misspecify-q", action="store_true")

    e = sub.add_parser("estimate", help="estimate on one CSV")
    data_args(e)
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--out", default="-", help="JSON report path (default: stdout)")

    r = sub.add_parser("resample", help="positivity-filtered resampling of one CSV")
    data_args(r)
    r.add_argument("--m", type=int, default=500)
    r.add_argument("--attempts", type=int, default=100)
    r.add_argument("--trunc-level", type=float, default=None)
    r.add_argument("--min-prop", type=float, default=0.01)
    r.add_argument("--out", required=True, help="output directory")

    rp = sub.add_parser("report", help="summarize per-rep CSVs")
    rp.add_argument("inputs", nargs="+")
    rp.add_argument("--out", required=True)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, jobs=args.jobs, seed=args.seed)
        if args.command == "report":
            return cmd_report(args.inputs, args.out)
        covs = None if args.covariates is None else [c.strip() for c in args.covariates.split(",") if c.strip()]
        learner = _learner_from_args(args)
        if args.command == "estimate":
            return cmd_estimate(args.data, args.treatment, args.outcome, covs, args.out,
                                seed=args.seed, level=args.level, learner=learner)
        return cmd_resample(args.data, args.treatment, args.outcome, covs, args.m, args.attempts, args.out,
                            seed=args.seed, trunc_level=args.trunc_level, min_prop=args.min_prop, learner=learner)
    except _USAGE_ERRORS as exc:
        sys.stderr.write(f"tve: error: {exc}\n")
        return EXIT_USAGE
    except TveError as exc:
        sys.stderr.write(f"tve: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
