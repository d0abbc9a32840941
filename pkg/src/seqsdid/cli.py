"""Command-line front end.

Subcommands: ``estimate``, ``placebo``, ``simulate``, ``montecarlo`` and
``oracle-check``. Each writes CSV outputs plus a ``run.json`` summary into
``--output-dir``. Module errors exit with status 1 and print a JSON error
object on stderr; flag misuse exits with status 2.
"""

import argparse
import hashlib
import json
import os
import platform
import sys
from dataclasses import asdict, replace
from importlib import metadata

import numpy as np
import pandas as pd
import scipy

from .balancing import INF
from .dgp import monte_carlo, parse_design_spec, simulate, write_simulation
from .errors import SsdidError, WeightSumViolation
from .inference import BootstrapConfig, bootstrap
from .io import atomic_write_csv, atomic_write_json
from .oracle import (
    OracleConfig,
    check_affine_hull,
    read_factors_csv,
    run_joint_ols,
    run_sequential_ols,
    tightest_bounds,
)
from .panel import CovariateScheme, aggregate, read_panel_csv
from .placebo import run_placebo
from .ssdid import AUTO, SsdidConfig, default_eta, run_sequential

ORACLE_TOL = 1e-8


class CliError(SsdidError):
    def __init__(self, code, message, **details):
        super().__init__(message, **details)
        self.code = code


def _eta(text):
    t = text.strip().lower()
    if t in (AUTO, INF):
        return t
    try:
        v = float(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected auto, inf or a positive number, got {text!r}")
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError("eta must be positive and finite")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("expected a nonnegative integer")
    return v


def _add_estimator_flags(p):
    p.add_argument("--input", required=True, help="panel CSV: unit,period,outcome,adoption[,weight,group]")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--a-min", type=int)
    p.add_argument("--a-max", type=int)
    p.add_argument("--eta", type=_eta, default=AUTO, help="auto, inf or a positive number")
    p.add_argument("--mu", default="shares", help="'shares' or a CSV with columns a,mu")
    p.add_argument("--scheme", choices=["none", "hybrid", "grouped"], default="none",
                   help="row aggregation scheme")
    p.add_argument("--never-split", action="store_true",
                   help="with --scheme hybrid, split never-treated units by group")
    p.add_argument("--preaggregated-parallel", action="store_true")


def _add_bootstrap_flags(p, default_b=0):
    p.add_argument("--bootstrap", type=_nonneg_int, default=default_b, metavar="B",
                   help="Bayesian bootstrap replicates (0 = point estimates only)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--interval", choices=["wald", "percentile"], default="wald")
    p.add_argument("--granularity", choices=["unit", "row"], default="unit")
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--jobs", type=_positive_int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqsdid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate effects and bootstrap intervals")
    _add_estimator_flags(est)
    est.add_argument("--k-max", type=_nonneg_int, default=0)
    _add_bootstrap_flags(est)

    pl = sub.add_parser("placebo", help="backdated-adoption placebo check")
    _add_estimator_flags(pl)
    pl.add_argument("--placebo-p", type=_positive_int, required=True)
    pl.add_argument("--k-max", type=_nonneg_int, help="defaults to P-1; larger needs --anticipation")
    pl.add_argument("--anticipation", action="store_true")
    pl.add_argument("--threshold", type=float, default=1.96)
    _add_bootstrap_flags(pl, default_b=100)

    sim = sub.add_parser("simulate", help="draw one panel from a design spec")
    sim.add_argument("--design-spec", required=True)
    sim.add_argument("--output-dir", required=True)
    sim.add_argument("--seed", type=_nonneg_int)
    sim.add_argument("--k-max", type=_nonneg_int, help="limit truths.csv to horizons 0..K")
    sim.add_argument("--scheme", choices=["none", "hybrid", "grouped"], default="none",
                     help="rows over which factors.csv averages the loadings")
    sim.add_argument("--never-split", action="store_true")

    mc = sub.add_parser("montecarlo", help="repeated simulation: RMSE, coverage, t-statistics")
    mc.add_argument("--design-spec", required=True)
    mc.add_argument("--output-dir", required=True)
    mc.add_argument("--reps", type=_positive_int, required=True)
    mc.add_argument("--k-max", type=_nonneg_int, default=0)
    mc.add_argument("--eta", type=_eta, default=AUTO, help="eta for the SSDID arm")
    mc.add_argument("--scheme", choices=["none", "hybrid", "grouped"], default="none")
    mc.add_argument("--never-split", action="store_true")
    mc.add_argument("--preaggregated-parallel", action="store_true")
    mc.add_argument("--oracle", action="store_true", help="add Sequential OLS with the true factors")
    _add_bootstrap_flags(mc, default_b=100)

    oc = sub.add_parser("oracle-check", help="sequential vs joint OLS with known factors")
    oc.add_argument("--input", required=True)
    oc.add_argument("--factors", required=True, help="CSV with columns kind,index,f1..fr")
    oc.add_argument("--output-dir", required=True)
    oc.add_argument("--a-star", type=int)
    oc.add_argument("--t-star", type=int)
    oc.add_argument("--scheme", choices=["none", "hybrid", "grouped"], default="none")
    oc.add_argument("--never-split", action="store_true")
    return parser


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _versions():
    return {"seqsdid": _version(), "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path):
    if not os.path.isfile(path):
        raise CliError("io.not_found", f"no such file: {path}", path=path)
    return path


def _scheme(args):
    if args.never_split and args.scheme != "hybrid":
        raise CliError("config.invalid", "--never-split only applies to --scheme hybrid")
    return CovariateScheme(mode=args.scheme, never_treated_split=args.never_split)


def _mu(arg):
    if arg == "shares":
        return None
    df = pd.read_csv(_require_file(arg), float_precision="round_trip")
    if list(df.columns) != ["a", "mu"]:
        raise WeightSumViolation("mu file must have columns a,mu")
    return {int(a): float(m) for a, m in zip(df["a"], df["mu"])}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else str(x)
    return x


def _run_json(args, argv, **extra):
    out = {"command": args.command, "argv": list(argv), "versions": _versions()}
    if getattr(args, "input", None):
        out["input"] = {"path": args.input, "sha256": _sha256(args.input)}
    out.update(extra)
    return _jsonable(out)


def _estimator_cfg(args, K, panel_rows):
    cfg = SsdidConfig(K=K, a_min=args.a_min, a_max=args.a_max, eta=args.eta, mu=_mu(args.mu),
                      preaggregated_parallel=args.preaggregated_parallel)
    cfg.bounds(panel_rows)  # surface range errors before any work
    return cfg


def _bootstrap_cfg(args):
    if args.seed is None:
        raise CliError("config.invalid", "--seed is required when --bootstrap > 0")
    gran = "unit" if args.granularity == "unit" else "cohort_row"
    return BootstrapConfig(B=args.bootstrap, alpha=args.alpha, seed=args.seed,
                           granularity=gran, interval_kind=args.interval)


def _source(panel, scheme, args):
    return panel if args.granularity == "unit" else aggregate(panel, scheme)


def cmd_estimate(args, argv):
    panel = read_panel_csv(_require_file(args.input))
    scheme = _scheme(args)
    rows = aggregate(panel, scheme)
    cfg = _estimator_cfg(args, args.k_max, rows)
    os.makedirs(args.output_dir, exist_ok=True)
    boot = None
    if args.bootstrap > 0:
        bcfg = _bootstrap_cfg(args)
        res = bootstrap(_source(panel, scheme, args), cfg, bcfg, scheme=scheme, n_jobs=args.jobs)
        grid, hz = res.point, res.horizon_frame()
        boot = asdict(bcfg)
        boot["outside_formal_theory"] = res.meta["outside_formal_theory"]
    else:
        if cfg.eta == AUTO:
            cfg = replace(cfg, eta=default_eta(panel))
        grid = run_sequential(rows, cfg, keep_cells=False)
        nan = np.full(grid.K + 1, np.nan)
        hz = pd.DataFrame({"k": np.arange(grid.K + 1), "tau_k": grid.tau_by_horizon,
                           "se": nan, "ci_lo": nan, "ci_hi": nan})
    atomic_write_csv(grid.to_frame(), os.path.join(args.output_dir, "estimates.csv"))
    atomic_write_csv(hz, os.path.join(args.output_dir, "horizon.csv"))
    atomic_write_json(_run_json(
        args, argv,
        estimator={"kind": grid.estimator_kind, "K": grid.K, "a_min": grid.meta["a_min"],
                   "a_max": grid.meta["a_max"], "eta_requested": args.eta, "eta_used": grid.eta_used,
                   "mu": args.mu, "scheme": asdict(scheme),
                   "preaggregated_parallel": args.preaggregated_parallel},
        bootstrap=boot, seed=args.seed,
        outputs=["estimates.csv", "horizon.csv"],
    ), os.path.join(args.output_dir, "run.json"))
    return 0


def cmd_placebo(args, argv):
    panel = read_panel_csv(_require_file(args.input))
    scheme = _scheme(args)
    cfg = SsdidConfig(K=0, a_min=args.a_min, a_max=args.a_max, eta=args.eta, mu=_mu(args.mu),
                      preaggregated_parallel=args.preaggregated_parallel)
    if args.bootstrap < 2:
        raise CliError("config.invalid", "placebo z-scores need --bootstrap >= 2")
    bcfg = _bootstrap_cfg(args)
    rep = run_placebo(_source(panel, scheme, args), args.placebo_p, cfg, bcfg,
                      threshold=args.threshold, anticipation=args.anticipation, K=args.k_max,
                      scheme=scheme, n_jobs=args.jobs)
    os.makedirs(args.output_dir, exist_ok=True)
    atomic_write_csv(rep.to_frame(), os.path.join(args.output_dir, "placebo.csv"))
    atomic_write_csv(rep.grid.to_frame(), os.path.join(args.output_dir, "estimates.csv"))
    atomic_write_json(_run_json(
        args, argv,
        estimator={"kind": rep.grid.estimator_kind, "K": rep.grid.K, "eta_requested": args.eta,
                   "eta_used": rep.grid.eta_used, "a_min_shifted": rep.grid.meta["a_min"],
                   "a_max_shifted": rep.grid.meta["a_max"], "scheme": asdict(scheme)},
        placebo={"P": rep.P, "threshold": rep.threshold, "anticipation": rep.anticipation,
                 "passed": rep.passed, "z": list(rep.z_scores)},
        bootstrap=asdict(bcfg), seed=args.seed, outputs=["placebo.csv", "estimates.csv"],
    ), os.path.join(args.output_dir, "run.json"))
    return 0


def _read_spec(args):
    with open(_require_file(args.design_spec)) as fh:
        text = fh.read()
    spec = parse_design_spec(text)
    if args.seed is None:
        raise CliError("config.invalid", "--seed is required")
    return replace(spec, seed=args.seed), text


def cmd_simulate(args, argv):
    spec, text = _read_spec(args)
    sim = simulate(spec)
    write_simulation(sim, args.output_dir, K=args.k_max, scheme=_scheme(args))
    atomic_write_json(_run_json(
        args, argv, design_spec=text, seed=args.seed,
        outputs=["panel.csv", "truths.csv", "factors.csv"],
    ), os.path.join(args.output_dir, "run.json"))
    return 0


def cmd_montecarlo(args, argv):
    spec, text = _read_spec(args)
    scheme = _scheme(args)
    if args.bootstrap < 2:
        raise CliError("config.invalid", "montecarlo needs --bootstrap >= 2")
    bcfg = _bootstrap_cfg(args)
    if bcfg.granularity != "unit":
        raise CliError("config.invalid", "montecarlo bootstraps at unit granularity only")
    cfgs = {
        "SSDID": SsdidConfig(K=args.k_max, eta=args.eta, preaggregated_parallel=args.preaggregated_parallel),
        "SEQ_DID": SsdidConfig(K=args.k_max, eta=INF, preaggregated_parallel=args.preaggregated_parallel),
    }
    res = monte_carlo(spec, args.reps, cfgs, bcfg, scheme=scheme, oracle=args.oracle, n_jobs=args.jobs)
    res.write(args.output_dir)
    atomic_write_json(_run_json(
        args, argv, design_spec=text, seed=args.seed, reps=args.reps, K=args.k_max,
        eta=args.eta, scheme=asdict(scheme), bootstrap=asdict(bcfg),
        outputs=["rmse.csv", "coverage.csv", "tstats.csv"],
    ), os.path.join(args.output_dir, "run.json"))
    return 0


def cmd_oracle_check(args, argv):
    panel = read_panel_csv(_require_file(args.input))
    f = read_factors_csv(_require_file(args.factors))
    rows = aggregate(panel, _scheme(args))
    if (args.a_star is None) != (args.t_star is None):
        raise CliError("config.invalid", "give both --a-star and --t-star or neither")
    if args.a_star is None:
        ocfg = tightest_bounds(f, rows)
        if ocfg is None:
            # report against the widest range so the diagnostic names the failure
            finite = [a for a in rows.cohorts if a <= rows.T]
            ocfg = OracleConfig(a_star=max(finite, default=rows.T), t_star=min(finite, default=2))
    else:
        ocfg = OracleConfig(a_star=args.a_star, t_star=args.t_star)
    report = check_affine_hull(f, rows, ocfg)
    diag = {"ok": report.ok, "reason": report.reason, "r": report.r,
            "loadings_rank": report.loadings_rank, "factors_rank": report.factors_rank,
            "n_controls": report.n_controls, "n_pre_periods": report.n_pre_periods,
            "a_star": ocfg.a_star, "t_star": ocfg.t_star}
    os.makedirs(args.output_dir, exist_ok=True)
    if not report.ok:
        atomic_write_json(_run_json(args, argv, affine_hull=diag, max_abs_diff=None),
                          os.path.join(args.output_dir, "run.json"))
        raise CliError(report.reason, "affine hull condition fails", **diag)
    seq = run_sequential_ols(rows, f, ocfg, keep_cells=False)
    joint = run_joint_ols(rows, f, ocfg)
    a = seq.adoption
    recs = []
    for i in range(seq.tau.shape[0]):
        for k in range(seq.tau.shape[1]):
            if np.isfinite(seq.tau[i, k]):
                recs.append((seq.labels[i], int(a[i]), k, seq.tau[i, k], joint.tau[i, k]))
    df = pd.DataFrame(recs, columns=["row", "a", "k", "sequential", "joint"])
    df["abs_diff"] = (df["sequential"] - df["joint"]).abs()
    worst = float(df["abs_diff"].max()) if len(df) else 0.0
    atomic_write_csv(df, os.path.join(args.output_dir, "oracle_check.csv"))
    atomic_write_json(_run_json(args, argv, affine_hull=diag, max_abs_diff=worst, tolerance=ORACLE_TOL,
                                outputs=["oracle_check.csv"]),
                      os.path.join(args.output_dir, "run.json"))
    if not worst <= ORACLE_TOL:
        raise CliError("oracle.mismatch", f"max |sequential - joint| = {worst:.3g} exceeds {ORACLE_TOL}",
                       max_abs_diff=worst)
    return 0


COMMANDS = {
    "estimate": cmd_estimate,
    "placebo": cmd_placebo,
    "simulate": cmd_simulate,
    "montecarlo": cmd_montecarlo,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except SsdidError as exc:
        err = exc.to_dict()
    except FileNotFoundError as exc:
        err = {"error": "io.not_found", "message": str(exc)}
    except (pd.errors.ParserError, pd.errors.EmptyDataError, KeyError) as exc:
        err = {"error": "io.bad_input", "message": str(exc)}
    print(json.dumps(_jsonable(err), sort_keys=True), file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
