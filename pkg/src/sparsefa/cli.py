"""Command-line front end.

Exit status: 0 when a fit converged, 2 when it stopped at ``--max-iter``,
1 on any error. Metrics go to stdout as one JSON line (and to a file when
``--report`` / ``--out`` is given).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fit
from .core import ModelConfig, ModelVariant
from .data import load_ml100k_split
from .errors import InvalidSplit, SparseFAError
from .experiments import (
    HARD_IMPUTE,
    evaluate,
    evaluate_baseline,
    fit_baseline,
    simulate,
    sweep,
)
from .files import load_params, read_ratings, save_params, write_json, write_ratings

EXIT_CONVERGED, EXIT_ERROR, EXIT_MAX_ITER = 0, 1, 2

VARIANTS = [v.value for v in ModelVariant]


def _emit(doc, path=None):
    line = json.dumps(doc)
    print(line)
    if path:
        Path(path).write_text(line + "\n", encoding="utf-8")


def _model_args(p):
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--k", type=int, default=None, help="latent dimension (default 0 for intercept models, else 1)")
    p.add_argument("--psi", choices=["shared", "per-item"], default="shared")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--backfit-passes", type=int, default=1)
    p.add_argument("--inner-sweeps", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic-init", action="store_true")


def _config(args, k=None):
    variant = ModelVariant(args.variant)
    if k is None:
        k = args.k if args.k is not None else int(variant.has_factors)
    return ModelConfig(
        variant=variant,
        k=k,
        psi_mode=args.psi,
        tol=args.tol,
        max_iter=args.max_iter,
        backfit_passes=args.backfit_passes,
        inner_sweeps=args.inner_sweeps,
        seed=args.seed,
        deterministic_init=args.deterministic_init,
    )


def cmd_ingest(args):
    if args.split not in (1, 2, 3, 4, 5):
        raise InvalidSplit(f"ML-100K has splits 1..5, got {args.split}")
    train, test = load_ml100k_split(args.raw_dir, args.split)
    write_ratings(args.train, train)
    write_ratings(args.test, test)
    _emit({"train_rows": train.n_entries, "test_rows": test.n_entries,
           "n_users": train.n_users, "n_items": train.n_items, "p": train.p})
    return EXIT_CONVERGED


def cmd_fit(args):
    config = _config(args)
    train = read_ratings(args.train)
    params, post, report = fit(train, config)
    save_params(args.params, params, post)
    if args.report:
        doc = report.to_dict()
        if not args.timings:
            # wall-clock times would make reruns differ byte-for-byte
            del doc["seconds_per_iteration"]
        write_json(args.report, doc)
    _emit({"variant": config.variant.value, "k": config.k, "iterations": report.iterations,
           "converged": report.converged, "objective": report.objective_trace[-1]})
    return EXIT_CONVERGED if report.converged else EXIT_MAX_ITER


def cmd_baseline(args):
    train = read_ratings(args.train)
    doc = fit_baseline(train, args.k, tol=args.tol, max_iter=args.max_iter)
    write_json(args.params, doc)
    _emit({"variant": HARD_IMPUTE, "k": args.k, "iterations": doc["iterations"],
           "converged": doc["converged"]})
    return EXIT_CONVERGED if doc["converged"] else EXIT_MAX_ITER


def cmd_evaluate(args):
    test = read_ratings(args.test)
    doc = json.loads(Path(args.params).read_text(encoding="utf-8"))
    if doc["variant"] == HARD_IMPUTE:
        metrics, pred = evaluate_baseline(doc, test)
    else:
        params, post = load_params(args.params)
        if post is None:
            raise SparseFAError("params file carries no posterior summary")
        metrics, pred = evaluate(params, post, test)
    if args.dump:
        rows = np.column_stack([test.users, test.items, test.ratings, pred])
        np.savetxt(args.dump, rows, fmt=["%d", "%d", "%.17g", "%.17g"],
                   header="user item rating predicted", comments="")
    _emit(metrics, args.report)
    return EXIT_CONVERGED


def cmd_sweep(args):
    train, test = read_ratings(args.train), read_ratings(args.test)
    ks = list(range(args.k_min, args.k_max + 1))
    seeds = list(range(args.seed, args.seed + args.seeds))
    base = None
    if args.variant != HARD_IMPUTE:
        if not ModelVariant(args.variant).has_factors:
            ks = [0]
        base = _config(args, k=ks[0])
    result = sweep(train, test, args.variant, ks, seeds, base, jobs=args.jobs)
    if args.out:
        write_json(args.out, result)
    _emit({"variant": args.variant, "cells": len(result["rows"]), "minimum": result["minimum"]})
    return EXIT_CONVERGED if result["minimum"] is not None else EXIT_ERROR


def cmd_simulate(args):
    config = _config(args)
    out, _, _ = simulate(
        args.n_users, args.n_items, config.k, args.p, args.ratings_per_user, config,
        sigma2_e=args.sigma2_e, sigma2_a=args.sigma2_a, sigma2_b=args.sigma2_b,
    )
    if args.report:
        write_json(args.report, out)
    summary = {k: v for k, v in out.items() if k != "objective_trace"}
    _emit(summary)
    return EXIT_CONVERGED if out["converged"] else EXIT_MAX_ITER


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsefa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build canonical train/test files from raw ML-100K")
    p.add_argument("--raw-dir", required=True)
    p.add_argument("--split", type=int, default=1)
    p.add_argument("--train", required=True, help="output training file")
    p.add_argument("--test", required=True, help="output test file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit one model variant")
    _model_args(p)
    p.add_argument("--train", required=True)
    p.add_argument("--params", required=True, help="output params JSON")
    p.add_argument("--report", help="output fit report JSON")
    p.add_argument("--timings", action="store_true", help="include seconds per iteration in the report")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("baseline", help="OLS + rank-K hard impute on residuals")
    p.add_argument("--train", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="test MSE of a params file")
    p.add_argument("--params", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--report", help="write metrics JSON here too")
    p.add_argument("--dump", help="write per-prediction rows here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="fit a K x seed grid and keep the minimum test MSE")
    p.add_argument("--variant", choices=VARIANTS + [HARD_IMPUTE], required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--psi", choices=["shared", "per-item"], default="shared")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--backfit-passes", type=int, default=1)
    p.add_argument("--inner-sweeps", type=int, default=1)
    p.add_argument("--deterministic-init", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the full sweep table here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", help="synthetic parameter-recovery run")
    _model_args(p)
    p.add_argument("--n-users", type=int, default=2000)
    p.add_argument("--n-items", type=int, default=100)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--ratings-per-user", type=int, default=30)
    p.add_argument("--sigma2-e", type=float, default=1.0)
    p.add_argument("--sigma2-a", type=float, default=1.0)
    p.add_argument("--sigma2-b", type=float, default=1.0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SparseFAError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
