"""Command-line front end.

Subcommands: train, eval, synth, bounds, partition. Exit codes: 0 on
success, 1 on numerical or solver failure (a diagnostics.json is written to
the output directory), 2 on usage, configuration or data errors.
"""

import json
import logging
import os
import sys
import time
from argparse import ArgumentDefaultsHelpFormatter, ArgumentParser, ArgumentTypeError, Namespace
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from config.settings import settings
from src.core import approximation_check, bounds, load_model, save_model
from src.data import (
    SYNTHETIC_KINDS,
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    load_pairs,
    load_quadruplets,
    sample_triplets,
    save_csv,
    save_pairs,
)
from src.errors import (
    ConfigError,
    DatasetError,
    DimensionMismatchError,
    InfeasibleInterpolantError,
    SolverFailureError,
    UnboundedProgramError,
)
from src.experiment import METRICS, ProtocolConfig, regression_experiment, regression_summary, run_repeats, summarize
from src.learn import TrainConfig, cross_validate, farthest_point_partition, fit
from src.tasks import bregman_kmeans, knn_classify, knn_leave_one_out, purity, rand_index, rank_all
from src.utils import get_timestamp, save_json, setup_logging

logger = logging.getLogger(__name__)

USAGE_ERRORS = (ConfigError, DimensionMismatchError, DatasetError, ValidationError)
SOLVER_ERRORS = (SolverFailureError, UnboundedProgramError, InfeasibleInterpolantError, np.linalg.LinAlgError)


def _lambda_arg(value: str) -> Optional[float]:
    if value == "auto":
        return None
    try:
        lam = float(value)
    except ValueError:
        raise ArgumentTypeError(f"expected a number or 'auto', got '{value}'")
    if lam < 0:
        raise ArgumentTypeError("lambda must be >= 0")
    return lam


def _hyperplanes_arg(value: str):
    if value in ("n", "auto"):
        return value
    try:
        return int(value)
    except ValueError:
        raise ArgumentTypeError(f"expected 'n', 'auto' or an integer, got '{value}'")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ArgumentTypeError(f"expected comma-separated integers, got '{value}'")


def _load_features(source: str, label_column: str) -> LabeledDataset:
    try:
        return load_dataset(source, label_column)
    except DatasetError as e:
        if e.column != label_column:
            raise
        logger.info(f"No '{label_column}' column in {source}, reading all columns as features")
        return load_dataset(source, None)


def _write_timing(out: str, started: float) -> None:
    save_json({"wall_time_seconds": time.time() - started, "finished_at": get_timestamp()}, os.path.join(out, "timing.json"))


def cmd_train(args: Namespace) -> int:
    started = time.time()
    lipschitz = args.lipschitz
    cfg = TrainConfig(
        lam=args.lam if args.lam is not None else 1.0,
        hyperplanes=args.hyperplanes,
        folds=args.folds,
        seed=args.seed,
        margin=args.margin,
        lipschitz=lipschitz,
        scale_features=args.scale_features,
        n_jobs=args.jobs,
        dump_program=args.dump_program,
    )
    if args.mode == "regression":
        if not args.pairs:
            raise ConfigError("--mode regression needs --pairs <csv with i,j,y>")
        ds = _load_features(args.data, args.label_column)
        S = load_pairs(args.pairs)
    else:
        ds = load_dataset(args.data, args.label_column)
        if args.quadruplets:
            S = load_quadruplets(args.quadruplets, args.margin)
        else:
            S = sample_triplets(ds, args.triplets, seed=args.seed, margin=args.margin)
    S.check_range(ds.n)

    K = None
    cv_table = None
    uses_lambda = args.mode == "pbdl" or lipschitz is True
    if args.lam is None and uses_lambda:
        cv = cross_validate(ds.X, S, cfg)
        cfg = cfg.model_copy(update={"lam": cv.best_lambda})
        K = cv.best_K
        cv_table = cv.summary().to_dict(orient="records")

    result = fit(ds.X, S, cfg, K=K)
    os.makedirs(args.out, exist_ok=True)
    save_model(result.model, os.path.join(args.out, "model.json"))
    report = {
        "command": "train",
        "mode": args.mode,
        "data": args.data,
        "n": ds.n,
        "d": ds.d,
        "R": ds.radius,
        "m": S.m,
        "seed": args.seed,
        "lambda": cfg.lam,
        "cross_validation": cv_table,
        **result.to_dict(),
    }
    save_json(report, os.path.join(args.out, "report.json"))
    _write_timing(args.out, started)
    print(f"model written to {os.path.join(args.out, 'model.json')} (K={result.model.K}, loss={result.train_loss:.6g})")
    return 0


def _evaluate_model(args: Namespace) -> dict:
    model = load_model(args.model)
    ds = load_dataset(args.data, args.label_column)
    query_first = args.argument_order == "query-first"
    clusters = bregman_kmeans(model, ds.X, ds.classes.shape[0], seed=args.seed, restarts=args.restarts)
    ranking = rank_all(model, ds.X, ds.y, query_first)
    if args.train_data:
        train = load_dataset(args.train_data, args.label_column)
        knn = knn_classify(model, train.X, train.y, ds.X, ds.y, args.k_neighbors, query_first)
    else:
        knn = knn_leave_one_out(model, ds.X, ds.y, args.k_neighbors, query_first)
    return {
        "command": "eval",
        "model": args.model,
        "data": args.data,
        "rand_index": rand_index(clusters.assignment, ds.y),
        "purity": purity(clusters.assignment, ds.y),
        "auc": ranking.mean_auc,
        "ave_p": ranking.mean_ave_p,
        "knn_acc": knn,
        "excluded_queries": ranking.excluded,
        "kmeans_objective": clusters.objective,
    }


def cmd_eval(args: Namespace) -> int:
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    if args.model:
        metrics = _evaluate_model(args)
    else:
        ds = load_dataset(args.data, args.label_column)
        cfg = ProtocolConfig(
            folds=args.folds,
            triplets=args.triplets,
            lam=args.lam,
            cv_folds=args.cv_folds,
            hyperplanes=args.hyperplanes,
            k_neighbors=args.k_neighbors,
            kmeans_restarts=args.restarts,
            query_first=args.argument_order == "query-first",
            scale_features=args.scale_features,
        )
        results = run_repeats(ds, cfg, args.repeats, args.seed, args.jobs)
        results.to_csv(os.path.join(args.out, "results.csv"), index=False)
        summary = summarize(results)
        metrics = {"command": "eval", "data": args.data, "repeats": args.repeats, "seed": args.seed}
        for metric in METRICS:
            metrics[metric] = summary.loc[metric, "mean"]
        metrics["ci95"] = {metric: summary.loc[metric, "ci95"] for metric in METRICS}
        metrics["per_seed"] = {col: results[col].tolist() for col in results.columns}
    save_json(metrics, os.path.join(args.out, "metrics.json"))
    _write_timing(args.out, started)
    print(" ".join(f"{m}={metrics[m]:.4f}" for m in METRICS))
    return 0


def cmd_synth(args: Namespace) -> int:
    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    if args.export:
        data = generate_synthetic(SyntheticSpec(kind=args.generator, n=args.n, noise=args.noise, seed=args.seed))
        names = [f"x{c + 1}" for c in range(data.X.shape[1])]
        save_csv(LabeledDataset(data.X, np.zeros(data.X.shape[0], dtype=int), names, args.generator), os.path.join(args.out, "points.csv"))
        save_pairs(data.supervision, os.path.join(args.out, "pairs.csv"))
    seeds = [args.seed + r for r in range(args.seeds)]
    results = regression_experiment(args.generator, args.schedule, seeds, args.noise, args.n_test, args.test_pairs)
    results.to_csv(os.path.join(args.out, "synth.csv"), index=False)
    summary = regression_summary(results)
    summary.to_csv(os.path.join(args.out, "synth_summary.csv"), index=False)
    save_json(
        {
            "command": "synth",
            "generator": args.generator,
            "schedule": list(args.schedule),
            "seeds": seeds,
            "noise": args.noise,
            "median_mse": summary.to_dict(orient="records"),
        },
        os.path.join(args.out, "report.json"),
    )
    _write_timing(args.out, started)
    print(summary.to_string(index=False))
    return 0


def cmd_bounds(args: Namespace) -> int:
    report = bounds(args.beta, args.R, args.K, args.d, args.L, args.m, args.delta, args.sigma)
    output = report.to_dict()
    print(json.dumps(output, indent=2, sort_keys=True))
    status = 0
    if args.check:
        checks = approximation_check(args.check_dim, args.check_K)
        output["check"] = []
        for check in checks:
            verdict = "PASS" if check.passed else "FAIL"
            breg = "n/a" if check.bregman_error is None else f"{check.bregman_error:.4e} <= {check.breg_bound:.4e}"
            print(f"K={check.K}: value {check.value_error:.4e} <= {check.value_bound:.4e}, bregman {breg}: {verdict}")
            output["check"].append(
                {
                    "K": check.K,
                    "value_error": check.value_error,
                    "value_bound": check.value_bound,
                    "bregman_error": check.bregman_error,
                    "breg_bound": check.breg_bound,
                    "passed": check.passed,
                }
            )
            if not check.passed:
                status = 1
    if args.out:
        save_json(output, os.path.join(args.out, "bounds.json"))
    return status


def cmd_partition(args: Namespace) -> int:
    ds = _load_features(args.data, args.label_column)
    partition = farthest_point_partition(ds.X, args.K, seed=args.seed, first=args.first)
    save_json({"data": args.data, "seed": args.seed, **partition.to_dict()}, os.path.join(args.out, "partition.json"))
    print(f"K={partition.K} radius={partition.radius:.6g}")
    return 0


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--log-level", default=settings.LOG_LEVEL, help="logging level")
    common.add_argument("--seed", type=int, default=0, help="random seed")

    parser = ArgumentParser(
        prog="pbdl",
        description="Learn Bregman divergences with max-affine generators.",
        formatter_class=ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], formatter_class=ArgumentDefaultsHelpFormatter, help="train a model")
    train.add_argument("--data", required=True, help="CSV file or built-in dataset name")
    train.add_argument("--label-column", default="label")
    train.add_argument("--mode", choices=["pbdl", "regression"], default="pbdl")
    train.add_argument("--triplets", type=int, default=2000, help="sampled comparisons when no --quadruplets file is given")
    train.add_argument("--quadruplets", help="CSV with columns i,j,k,l")
    train.add_argument("--pairs", help="CSV with columns i,j,y (regression)")
    train.add_argument("--lambda", dest="lam", type=_lambda_arg, default="auto", help="weight of L, or 'auto' for CV")
    train.add_argument("--hyperplanes", type=_hyperplanes_arg, default="n", help="'n', 'auto' or an integer K")
    train.add_argument("--folds", type=int, default=3, help="CV folds")
    train.add_argument("--margin", type=float, default=1.0)
    train.add_argument("--lipschitz", dest="lipschitz", action="store_const", const=True, default=None, help="enforce the l1 slope budget")
    train.add_argument("--no-lipschitz", dest="lipschitz", action="store_const", const=False, help="drop the l1 slope budget")
    train.add_argument("--scale-features", action="store_true", help="rescale features to [-1, 1]")
    train.add_argument("--jobs", type=int, default=1, help="parallel CV fits")
    train.add_argument("--dump-program", help="write the assembled program as text")
    train.add_argument("--out", default=settings.OUTPUT_DIR)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], formatter_class=ArgumentDefaultsHelpFormatter, help="evaluate clustering, ranking and k-NN")
    ev.add_argument("--data", required=True, help="CSV file or built-in dataset name")
    ev.add_argument("--label-column", default="label")
    ev.add_argument("--model", help="evaluate this model instead of running the protocol")
    ev.add_argument("--train-data", help="k-NN reference set for --model (default: leave-one-out)")
    ev.add_argument("--repeats", type=int, default=1)
    ev.add_argument("--jobs", type=int, default=1, help="parallel repeats")
    ev.add_argument("--triplets", type=int, default=2000)
    ev.add_argument("--lambda", dest="lam", type=_lambda_arg, default="auto")
    ev.add_argument("--folds", type=int, default=3, help="point folds of the protocol")
    ev.add_argument("--cv-folds", type=int, default=3)
    ev.add_argument("--hyperplanes", type=_hyperplanes_arg, default="n")
    ev.add_argument("--k-neighbors", type=int, default=5)
    ev.add_argument("--restarts", type=int, default=1, help="k-means restarts")
    ev.add_argument("--argument-order", choices=["query-first", "query-second"], default="query-first")
    ev.add_argument("--scale-features", action="store_true")
    ev.add_argument("--out", default=settings.OUTPUT_DIR)
    ev.set_defaults(func=cmd_eval)

    synth = sub.add_parser("synth", parents=[common], formatter_class=ArgumentDefaultsHelpFormatter, help="synthetic regression experiment")
    synth.add_argument("--generator", choices=SYNTHETIC_KINDS, required=True)
    synth.add_argument("--schedule", type=_int_list, default=[20, 80, 320], help="training pair counts")
    synth.add_argument("--seeds", type=int, default=10, help="number of seeds starting at --seed")
    synth.add_argument("--noise", type=float, default=0.05)
    synth.add_argument("--n-test", type=int, default=1000)
    synth.add_argument("--test-pairs", type=int, default=1000)
    synth.add_argument("--export", action="store_true", help="also write points.csv and pairs.csv")
    synth.add_argument("--n", type=int, default=100, help="points in the exported data set")
    synth.add_argument("--out", default=settings.OUTPUT_DIR)
    synth.set_defaults(func=cmd_synth)

    bnd = sub.add_parser("bounds", parents=[common], formatter_class=ArgumentDefaultsHelpFormatter, help="print bound formulas")
    bnd.add_argument("--beta", type=float, required=True)
    bnd.add_argument("--R", type=float, required=True)
    bnd.add_argument("--K", type=int, required=True)
    bnd.add_argument("--d", type=int, required=True)
    bnd.add_argument("--L", type=float, default=1.0)
    bnd.add_argument("--m", type=int, default=1000)
    bnd.add_argument("--delta", type=float, default=0.05)
    bnd.add_argument("--sigma", type=float, default=0.0)
    bnd.add_argument("--check", action="store_true", help="run the grid approximation check for ||x||^2")
    bnd.add_argument("--check-dim", type=int, default=2)
    bnd.add_argument("--check-K", type=_int_list, default=[4, 9, 16, 25])
    bnd.add_argument("--out", default=None, help="also write bounds.json here")
    bnd.set_defaults(func=cmd_bounds)

    part = sub.add_parser("partition", parents=[common], formatter_class=ArgumentDefaultsHelpFormatter, help="farthest-point partition")
    part.add_argument("--data", required=True)
    part.add_argument("--label-column", default="label")
    part.add_argument("--K", type=int, required=True)
    part.add_argument("--first", type=int, default=None, help="index of the first center")
    part.add_argument("--out", default=settings.OUTPUT_DIR)
    part.set_defaults(func=cmd_partition)
    return parser


def _write_diagnostics(args: Namespace, error: Exception) -> None:
    out = getattr(args, "out", None) or settings.OUTPUT_DIR
    report = getattr(error, "report", None)
    save_json(
        {
            "error": str(error),
            "type": type(error).__name__,
            "solver": report.to_dict() if report is not None and hasattr(report, "to_dict") else None,
        },
        os.path.join(out, "diagnostics.json"),
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level, settings.LOG_FILE)
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SOLVER_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        _write_diagnostics(args, e)
        print(f"solver failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
