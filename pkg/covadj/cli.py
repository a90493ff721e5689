# -*- coding: UTF-8 -*-
import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from .data import cluster_average, load_trial_csv
from .data_types import CsvSchema, Method, PermutationPlan, PlanMode, Structure
from .dbutil import DB
from .pipeline import build_cells, parse_adjustment
from .randomize import NULL_FITS
from .simulate import (default_cells, design_from_text, design_to_text, list_designs,
                       named_design)
from .utils import CFG, default_workers, load_config, resolved, use_config, validate_filename
from .worker import AnalysisWorker, StudyWorker

logger = logging.getLogger(__name__)

METHODS = [m.value for m in Method]
WORKINGS = [s.value for s in Structure]


def _common_args(parser):
    parser.add_argument(
        "--seed", type=int, help="Seed for permutations, CV folds and data generation. "
                                 "Default: a fresh seed, recorded in the output")
    parser.add_argument(
        "--alpha", type=float, help="Nominal level. Default from config")
    parser.add_argument(
        "--permutations", "-B", type=int, help="Monte Carlo permutations for the exact test")
    parser.add_argument(
        "--method", "-m", action="append", choices=METHODS,
        help="Test to run, repeatable. Default: every method")
    parser.add_argument(
        "--out", "-o", type=validate_filename,
        help="Base name of result files. Default: results_<timestamp>")
    parser.add_argument(
        "--cv-folds", type=int,
        help="Cross-validation folds for adaptive LASSO. Default: the design's rule or config")
    parser.add_argument(
        "--workers", type=int, help="Worker processes. Default from $COVADJ_WORKERS or 1")
    parser.add_argument(
        "--config", help="JSON file merged over the packaged config.json")
    parser.add_argument(
        "--db", help="Path to sqlite database recording the run history")
    parser.add_argument(
        "--debug", help="Print debug logs to console", action="store_true")
    parser.add_argument(
        "--text", help="Also save results as .txt", action="store_true")
    parser.add_argument(
        "--json", help="Also save results as .json", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covadj",
        description="""Covariate-adjusted tests of treatment effect for randomized trials.
Independent units are clusters of size one.
Results are saved as .csv, with .txt and .json on request.""")
    sub = parser.add_subparsers(dest="command")
    sub.required = True

    analyze = sub.add_parser("analyze", help="Test the treatment effect in a trial CSV")
    analyze.add_argument(
        "--input", "-i", required=True, help="Trial CSV, one row per unit")
    analyze.add_argument(
        "--adjust", "-a", action="append",
        help="none, aic, bicn, bicm, alasso or fixed:<cols>, repeatable. Default: none")
    analyze.add_argument(
        "--working", "-w", action="append", choices=WORKINGS,
        help="Working covariance, repeatable. Default: indep")
    analyze.add_argument(
        "--cluster-average", action="store_true",
        help="Collapse clusters to their means and analyze them as independent units")
    analyze.add_argument(
        "--center", action="store_true", help="Center outcomes for unadjusted score tests")
    analyze.add_argument(
        "--exhaustive", action="store_true",
        help="Enumerate every assignment in the exact test instead of sampling")
    analyze.add_argument(
        "--whiten", action="store_true",
        help="Select covariates on data whitened by the working covariance")
    analyze.add_argument(
        "--null-fit", choices=list(NULL_FITS), default="pooled",
        help="Fit the score-test null model on both arms or on controls only")
    analyze.add_argument("--cluster-col", default="cluster")
    analyze.add_argument("--treatment-col", default="treatment")
    analyze.add_argument("--outcome-col", default="outcome")
    analyze.add_argument(
        "--exclude", default="", help="Comma separated columns that are not covariates")
    analyze.add_argument(
        "--nominal", default="", help="Comma separated nominal covariates")
    _common_args(analyze)

    simulate = sub.add_parser("simulate", help="Monte Carlo rejection rates on a named design")
    simulate.add_argument("--design", "-d", help="Named design, see --list-designs")
    simulate.add_argument("--design-file", help="key=value design description")
    simulate.add_argument("--n-per-arm", type=int, help="Clusters per arm")
    simulate.add_argument("--cluster-size", type=int, help="Units per cluster")
    simulate.add_argument("--reps", type=int, help="Replicates. Default from config")
    simulate.add_argument(
        "--list-designs", action="store_true", help="Print available designs and exit")
    simulate.add_argument(
        "--smoke", action="store_true",
        help="Allow fewer replicates than simulate.min_reps for a quick check")
    _common_args(simulate)
    return parser


def _split(text: str) -> tuple:
    return tuple(filter(None, (t.strip() for t in text.split(","))))


def _setup_logging(debug: bool):
    logging.basicConfig(
        format='[%(levelname)s][%(module)s] %(message)s',
        level=logging.DEBUG if debug else logging.ERROR)


def _seed(args) -> int:
    if args["seed"] is not None:
        return args["seed"]
    seed = int(np.random.SeedSequence().entropy % 2 ** 32)
    logger.debug(f"No seed given, using {seed}")
    return seed


def _check_common(parser, args):
    if args["alpha"] is not None and not 0 < args["alpha"] < 1:
        parser.error(f"--alpha must lie in (0, 1), got {args['alpha']}")
    if args["permutations"] is not None and args["permutations"] < 1:
        parser.error(f"--permutations must be at least 1, got {args['permutations']}")
    if args["workers"] is not None and args["workers"] < 1:
        parser.error(f"--workers must be at least 1, got {args['workers']}")
    if args["cv_folds"] is not None and args["cv_folds"] < 2:
        parser.error(f"--cv-folds must be at least 2, got {args['cv_folds']}")


def run_analyze(args, cfg, db) -> int:
    schema = CsvSchema(args["cluster_col"], args["treatment_col"], args["outcome_col"],
                       _split(args["exclude"]), _split(args["nominal"]))
    data = load_trial_csv(args["input"], schema)
    if args["cluster_average"]:
        data = cluster_average(data)
    seed = _seed(args)
    methods = [Method(m) for m in args["method"] or cfg["cli"]["methods"]]
    adjustments = [parse_adjustment(text, data.covariate_names)._replace(
                       whiten=args["whiten"], cv_folds=args["cv_folds"])
                   for text in args["adjust"] or ["none"]]
    workings = [Structure(w) for w in args["working"] or [Structure.INDEPENDENCE.value]]
    cells = build_cells(methods, adjustments, workings, args["center"], args["null_fit"])
    plan = PermutationPlan(PlanMode.EXHAUSTIVE if args["exhaustive"] else PlanMode.MONTE_CARLO,
                           resolved(args["permutations"], "randomize", "permutations"), seed)
    params = {"input": args["input"], "methods": [m.value for m in methods],
              "adjust": [a.label for a in adjustments], "working": [w.value for w in workings],
              "cluster_average": args["cluster_average"], "center": args["center"],
              "whiten": args["whiten"], "null_fit": args["null_fit"], "cv_folds": args["cv_folds"],
              "plan": {"mode": plan.mode.value, "B": plan.B},
              "alpha": resolved(args["alpha"], "simulate", "alpha"), "schema": schema._asdict()}
    worker = AnalysisWorker(cfg, db, data, cells, plan, seed, filename=args["out"] or "",
                            save_txt=args["text"], save_json=args["json"], params=params)
    worker.run()
    worker.report(to_std_out=True)
    return 1 if worker.any_errors else 0


def run_simulate(parser, args, cfg, db) -> int:
    if args["list_designs"]:
        for name in list_designs(cfg):
            print(name)
        return 0
    if args["reps"] is not None and args["reps"] < 1:
        parser.error(f"--reps must be at least 1, got {args['reps']}")
    if bool(args["design"]) == bool(args["design_file"]):
        parser.error("Give exactly one of --design and --design-file")

    seed = _seed(args)
    overrides = {"n_per_arm": args["n_per_arm"], "cluster_size": args["cluster_size"],
                 "cv_folds": args["cv_folds"]}
    if args["design_file"]:
        with open(args["design_file"], "r") as f:
            design = design_from_text(f.read())
        overrides["seed"] = seed
        design = design._replace(**{k: v for k, v in overrides.items() if v is not None})
    else:
        design = named_design(args["design"], seed, cfg, **overrides)
    reps_key = "reps_alt" if design.eta[1] != 0 else "reps_null"
    reps = resolved(args["reps"], "simulate", reps_key, cfg)
    alpha = resolved(args["alpha"], "simulate", "alpha", cfg)
    permutations = resolved(args["permutations"], "randomize", "permutations", cfg)
    methods = [Method(m) for m in args["method"]] if args["method"] else None
    cells = default_cells(design, methods, cfg)
    workers = args["workers"] or default_workers(cfg)
    # worker count stays out of the record: it never changes results
    params = {"design": design_to_text(design), "reps": reps, "alpha": alpha,
              "permutations": permutations, "methods": [c.key for c in cells]}
    worker = StudyWorker(cfg, db, design, cells, reps, alpha, permutations, workers,
                         filename=args["out"] or "", save_txt=args["text"],
                         save_json=args["json"], params=params, smoke=args["smoke"])
    worker.run()
    worker.report(to_std_out=True)
    return 1 if worker.any_errors else 0


def main(argv: Optional[List[str]] = None) -> int:
    """Exit status 0 when every cell produced a result, 1 when a cell or the
    run failed, 2 on usage errors (raised by argparse as SystemExit)."""
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    _setup_logging(args["debug"])
    _check_common(parser, args)

    db = None
    try:
        cfg = load_config(args["config"])
        use_config(cfg)
        if args["db"]:
            db = DB(args["db"])
        if args["command"] == "analyze":
            return run_analyze(args, CFG, db)
        return run_simulate(parser, args, CFG, db)
    except (ValueError, OSError) as e:
        # CovAdjError is a ValueError
        logger.error(str(e))
        print(f"covadj: error: {e}", file=sys.stderr)
        return 1
    finally:
        if db is not None:
            db.close()


if __name__ == "__main__":
    sys.exit(main())
