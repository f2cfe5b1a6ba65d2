"""Command-line front end: design, analyze, simulate, theory."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .design import (
    BalanceCriterion,
    DesignSpec,
    InfeasibleRatesError,
    MaxDrawsExceeded,
    calibrate_threshold,
    empirical_threshold,
    PreparedCriterion,
    rerandomize,
)
from .estimate import estimate
from .fpstats import ClusterExperiment, RankDeficiencyError
from .inference import DEFAULT_MC, confidence_interval, improved_variance_haj, improved_variance_ht
from .simharness import (
    FactorialConfig,
    ScenarioConfig,
    SCENARIOS,
    factorial_study,
    generate_population,
    impute_potential_outcomes,
    resolve_threads,
    run_study,
    scenario,
    write_rows_csv,
)
from . import theory

log = logging.getLogger("clusterre")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad configuration or input data (exit code 1)."""


class NumericalError(Exception):
    """Calibration or feasibility failure (exit code 2)."""


# ---------------------------------------------------------------------------
# input


def load_config(path):
    if path is None:
        return {}, ""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}:{err.lineno}:{err.colno}: invalid JSON: {err.msg}") from err
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top-level JSON value must be an object")
    return cfg, text


def read_table(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = reader.fieldnames or []
    except OSError as err:
        raise UsageError(f"cannot read data {path}: {err}") from err
    if not rows:
        raise UsageError(f"{path}: no data rows")
    return header, rows


def _column(rows, header, name, path, kind=float):
    if name not in header:
        raise UsageError(f"{path}: missing column '{name}'")
    out = []
    for i, r in enumerate(rows, start=2):
        val = r[name]
        try:
            out.append(kind(val))
        except (TypeError, ValueError) as err:
            raise UsageError(f"{path}:{i}: column '{name}' has non-numeric value {val!r}") from err
    return np.array(out)


def build_experiment(cfg, data_path, need_y=False):
    """Experiment from unit rows ``{cluster_id, size?, x..., y?, z?}``.

    ``c_columns`` entries are ``n`` (cluster size), ``total:<x column>``
    (scaled cluster total) or a unit column constant within clusters.
    """
    header, rows = read_table(data_path)
    cid_col = cfg.get("cluster_column", "cluster_id")
    if cid_col not in header:
        raise UsageError(f"{data_path}: missing column '{cid_col}'")
    ids = [r[cid_col] for r in rows]
    x_cols = list(cfg.get("x_columns", []))
    x = np.column_stack([_column(rows, header, c, data_path) for c in x_cols]) if x_cols else None
    y = _column(rows, header, cfg.get("y_column", "y"), data_path) if need_y else None
    exp = ClusterExperiment.from_units(ids, x=x, y_obs=y, x_names=x_cols)
    if "size" in header:
        sizes = _column(rows, header, "size", data_path)
        first = np.zeros(exp.M)
        first[exp.cluster] = sizes
        if not np.array_equal(first, exp.sizes):
            raise UsageError(f"{data_path}: 'size' column disagrees with the rows per cluster")
    z_col = cfg.get("z_column", "z")
    if need_y:
        zu = _column(rows, header, z_col, data_path, int)
        z = np.zeros(exp.M, dtype=np.int8)
        z[exp.cluster] = zu
        if np.any(z[exp.cluster] != zu) or not set(np.unique(zu)) <= {0, 1}:
            raise UsageError(f"{data_path}: '{z_col}' must be 0/1 and constant within clusters")
        exp.z = z
    c_cols = list(cfg.get("c_columns", []))
    if c_cols:
        cols = []
        for name in c_cols:
            if name == "n":
                cols.append(exp.sizes.astype(float))
            elif name.startswith("total:"):
                src = name.split(":", 1)[1]
                cols.append(exp.scaled_totals(_column(rows, header, src, data_path)))
            else:
                v = _column(rows, header, name, data_path)
                per = np.zeros(exp.M)
                per[exp.cluster] = v
                if np.any(per[exp.cluster] != v):
                    raise UsageError(f"{data_path}: cluster covariate '{name}' varies within a cluster")
                cols.append(per)
        exp.c = np.column_stack(cols)
        exp.c_names = c_cols
    return exp


def _criterion(cfg):
    spec = cfg.get("criterion")
    if spec is None:
        return None
    try:
        return BalanceCriterion.from_dict(spec)
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"invalid criterion: {err}") from err


def _prepare(exp, crit, m1, rng, threshold_mode="asymptotic"):
    try:
        prep = PreparedCriterion(exp, crit, m1)
    except RankDeficiencyError as err:
        raise NumericalError(str(err)) from err
    except ValueError as err:
        raise UsageError(str(err)) from err
    if prep.tiers is None and prep.threshold is None:
        if crit.target_rate is None:
            raise UsageError("criterion needs a threshold or target_rate")
        if threshold_mode == "empirical":
            prep.threshold = empirical_threshold(prep, crit.target_rate, rng)
        else:
            prep.threshold = calibrate_threshold(prep, crit.target_rate, rng=rng)
    return prep


# ---------------------------------------------------------------------------
# output


def _config_hash(text):
    return hashlib.sha256(text.encode()).hexdigest()


def write_manifest(path, command, cfg_text, seed, started, **extra):
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": _config_hash(cfg_text),
        "seed": seed,
        "version": __version__,
        "numpy": np.__version__,
        "wall_time_s": round(time.time() - started, 3),
    }
    manifest.update(extra)
    Path(path).write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats so output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands


def cmd_design(args, cfg, cfg_text, started):
    if args.data is None or args.out is None:
        raise UsageError("design needs --data and --out")
    exp = build_experiment(cfg, args.data)
    crit = _criterion(cfg)
    m1 = int(cfg.get("m1", exp.M // 2))
    rng = np.random.default_rng(args.seed)
    spec_kw = {"max_draws": int(cfg.get("max_draws", 1_000_000))}
    if crit is None:
        prep = None
    elif crit.threshold is not None and math.isinf(crit.threshold):
        prep = PreparedCriterion(exp, crit, m1)
    else:
        prep = _prepare(exp, crit, m1, rng, cfg.get("threshold_mode", "asymptotic"))
    try:
        z, used, stat = rerandomize(exp, DesignSpec(criterion=crit, m1=m1, **spec_kw), rng, prepared=prep)
    except MaxDrawsExceeded as err:
        raise NumericalError(f"{err} (draws={err.draws}, best={err.best_statistic})") from err
    labels = exp.cluster_labels
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "z"])
        for lab, zi in zip(labels, z.z):
            w.writerow([lab, int(zi)])
    thr = None
    if prep is not None:
        thr = prep.threshold if prep.tiers is None else prep.tier_thresholds
    stat_out = None if stat is None else np.asarray(stat).tolist()
    write_manifest(_manifest_path(args.out), "design", cfg_text, args.seed, started,
                   draws_used=used, statistic=stat_out, threshold=thr,
                   realized_acceptance_rate=1.0 / used)
    return EXIT_OK


def _improved_for(exp, z, method, crit, analysis_cols):
    adjusted = method.endswith("_adj")
    cols = analysis_cols if adjusted else None
    if method.startswith("ht"):
        if crit.level != "cluster":
            raise UsageError("ht estimators pair with a cluster-level criterion")
        if adjusted and cols is None:
            cols = list(range(exp.c.shape[1]))
        return improved_variance_ht(exp, z, cols, crit.columns)
    if crit.level != "individual":
        raise UsageError("haj estimators pair with an individual-level criterion")
    if adjusted and cols is None:
        cols = list(range(exp.x.shape[1]))
    return improved_variance_haj(exp, z, cols, crit.columns)


def cmd_analyze(args, cfg, cfg_text, started):
    if args.data is None or args.out is None:
        raise UsageError("analyze needs --data and --out")
    exp = build_experiment(cfg, args.data, need_y=True)
    method = cfg.get("method", "haj")
    analysis_cols = cfg.get("analysis_columns")
    level = float(cfg.get("level", 0.95))
    rng = np.random.default_rng(args.seed)
    try:
        rep = estimate(exp, exp.z, method, analysis_cols, bool(cfg.get("small_sample", False)))
    except RankDeficiencyError as err:
        raise NumericalError(str(err)) from err
    except ValueError as err:
        raise UsageError(str(err)) from err
    lo, hi = confidence_interval(rep, level)
    out = {"schema_version": SCHEMA_VERSION, "method": method, "tau_hat": rep.tau_hat, "se": rep.se,
           "se_flavor": rep.se_flavor, "level": level, "normal_ci": [lo, hi], "warnings": []}
    clipping = {}
    crit = _criterion(cfg)
    if crit is None:
        msg = "no design criterion declared; improved interval omitted"
        log.warning(msg)
        out["warnings"].append(msg)
    else:
        if crit.tiers:
            raise UsageError("improved intervals are available for single quadratic-form criteria")
        try:
            prep = _prepare(exp, crit, int(exp.z.sum()), rng, cfg.get("threshold_mode", "asymptotic"))
            ie = _improved_for(exp, exp.z, method, crit, analysis_cols)
        except RankDeficiencyError as err:
            raise NumericalError(str(err)) from err
        except (ValueError, IndexError) as err:
            raise UsageError(f"declared criterion inconsistent with data: {err}") from err
        ilo, ihi = confidence_interval(rep, level, ie, crit.kind, prep.threshold, prep.A,
                                       mc_size=args.mc_size, rng=rng)
        out["improved_ci"] = [ilo, ihi]
        out["improved"] = {"v_hat": ie.v_hat, "r2_hat": ie.r2_hat, "mu_hat": ie.mu_hat,
                           "threshold": prep.threshold}
        clipping = {"v_clipped": int(ie.v_clipped), "r2_clipped": int(ie.r2_clipped)}
    if args.impute:
        full = impute_potential_outcomes(exp)
        out["imputed_population"] = {"tau": full.tau}
    write_json(args.out, out)
    write_manifest(_manifest_path(args.out), "analyze", cfg_text, args.seed, started,
                   clipping=clipping, mc_size=args.mc_size)
    return EXIT_OK


def _scenario_from(cfg, args):
    spec = cfg.get("scenario", 1)
    overrides = {k: v for k, v in cfg.items() if k in ScenarioConfig.__dataclass_fields__}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mc_size is not None:
        overrides["mc_size"] = args.mc_size
    try:
        if isinstance(spec, int):
            if spec not in SCENARIOS:
                raise UsageError(f"unknown scenario {spec}; choose from {sorted(SCENARIOS)}")
            return scenario(spec, **overrides)
        if isinstance(spec, dict):
            return ScenarioConfig.from_dict({**spec, **overrides})
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid scenario: {err}") from err
    raise UsageError("'scenario' must be a number or an object")


def cmd_simulate(args, cfg, cfg_text, started):
    if args.out is None:
        raise UsageError("simulate needs --out DIR")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(args.threads)
    extra = {}
    if "factorial" in cfg:
        try:
            fcfg = FactorialConfig.from_dict(cfg["factorial"])
        except (TypeError, ValueError) as err:
            raise UsageError(f"invalid factorial config: {err}") from err
        rows = factorial_study(fcfg, threads)
        write_rows_csv(rows, out_dir / "factorial.csv")
        failures = sum(r["failures"] for r in rows)
        extra["failures"] = failures
    elif "data" in cfg:
        if not args.impute:
            raise UsageError("simulating on observed data needs --impute to fill potential outcomes")
        exp = impute_potential_outcomes(build_experiment(cfg, cfg["data"], need_y=True))
        methods = tuple(cfg.get("methods", ("ReMC", "ReMX", "Haj", "HT", "ReMC.adj", "ReMX.adj")))
        design_cols = cfg.get("design_columns")
        analysis_cols = cfg.get("analysis_columns")
        seed = 0 if args.seed is None else args.seed
        rows = run_study(exp, methods, int(cfg.get("replications", 1000)), float(cfg.get("alpha", 0.001)),
                         seed, cfg.get("m1"), float(cfg.get("level", 0.95)),
                         args.mc_size or DEFAULT_MC, threads,
                         threshold_mode=cfg.get("threshold_mode", "empirical"),
                         analysis_cols=analysis_cols, design_cols=design_cols)
        write_rows_csv(rows, out_dir / "metrics.csv")
        extra["acceptance_rates"] = {r.method: r.acceptance_rate for r in rows}
        extra["failures"] = sum(r.failures for r in rows)
    else:
        scfg = _scenario_from(cfg, args)
        exp = generate_population(scfg, np.random.default_rng([scfg.seed, 0xC0FFEE]))
        rows = run_study(exp, scfg.methods, scfg.replications, scfg.alpha, scfg.seed, scfg.M1,
                         scfg.level, scfg.mc_size, threads)
        write_rows_csv(rows, out_dir / "metrics.csv")
        extra["scenario"] = scfg.to_dict()
        extra["population"] = {"gamma": exp.meta.get("gamma"), "share": exp.meta.get("share"),
                               "tau": exp.tau, "N": exp.N}
        extra["acceptance_rates"] = {r.method: r.acceptance_rate for r in rows}
        extra["failures"] = sum(r.failures for r in rows)
    write_manifest(out_dir / "manifest.json", "simulate", cfg_text, args.seed, started,
                   threads=threads, **extra)
    if extra.get("failures"):
        log.error("%d replications failed", extra["failures"])
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_theory(args, cfg, cfg_text, started):
    if args.out is None:
        raise UsageError("theory needs --out")
    report = {"schema_version": SCHEMA_VERSION}
    if "weight_ratio" in cfg:
        deltas = cfg["weight_ratio"].get("delta", [1.0]) if isinstance(cfg["weight_ratio"], dict) else [1.0]
        deltas = deltas if isinstance(deltas, list) else [deltas]
        report["weight_ratio"] = [{"delta": d, "ratio": theory.two_covariate_weight_ratio(float(d)),
                                 "closed_form": math.sqrt((4 - d) / (4 + d))} for d in deltas]
    if "scenario" in cfg or "data" in cfg:
        if "data" in cfg:
            if not args.impute:
                raise UsageError("theory on observed data needs --impute")
            exp = impute_potential_outcomes(build_experiment(cfg, cfg["data"], need_y=True))
        else:
            scfg = _scenario_from(cfg, args)
            exp = generate_population(scfg, np.random.default_rng([scfg.seed, 0xC0FFEE]))
        alpha = float(cfg.get("alpha", 0.001))
        criteria = cfg.get("criteria", [{"name": "mahalanobis", "kind": "mahalanobis"}])
        try:
            rows = theory.compare_designs(exp, criteria, alpha, cfg.get("m1"))
        except InfeasibleRatesError as err:
            raise NumericalError(str(err)) from err
        except (KeyError, TypeError, ValueError) as err:
            raise UsageError(f"invalid criteria: {err}") from err
        report["alpha"] = alpha
        report["designs"] = [r.to_dict() for r in rows]
        if cfg.get("individual_dominance"):
            if exp.x is None:
                raise UsageError("dominance check needs individual-level covariates")
            left, right, holds = theory.individual_dominance_check(exp, cfg.get("m1"))
            report["individual_dominance"] = {"individual_residual_variance": left,
                                    "cluster_residual_variance": right,
                                    "verdict": "holds" if holds else "violated"}
    if len(report) == 1:
        raise UsageError("theory config needs 'weight_ratio', 'scenario' or 'data'")
    write_json(args.out, report)
    write_manifest(_manifest_path(args.out), "theory", cfg_text, args.seed, started)
    return EXIT_OK


COMMANDS = {"design": cmd_design, "analyze": cmd_analyze, "simulate": cmd_simulate, "theory": cmd_theory}


def build_parser():
    p = argparse.ArgumentParser(prog="clusterre", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=str, default=None)
        s.add_argument("--data", type=str, default=None)
        s.add_argument("--out", type=str, default=None)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--threads", type=int, default=None)
        s.add_argument("--mc-size", type=int, default=None, dest="mc_size")
        s.add_argument("--impute", action="store_true")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_USAGE if err.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    if args.mc_size is not None and args.mc_size < 10_000:
        print("error: --mc-size must be at least 10000", file=sys.stderr)
        return EXIT_USAGE
    if args.command not in ("design", "analyze", "simulate", "theory"):
        return EXIT_USAGE
    started = time.time()
    try:
        cfg, cfg_text = load_config(args.config)
        if args.command in ("design", "analyze"):
            args.seed = 0 if args.seed is None else args.seed
            args.mc_size = args.mc_size or DEFAULT_MC
        return COMMANDS[args.command](args, cfg, cfg_text, started)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, InfeasibleRatesError, MaxDrawsExceeded, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
