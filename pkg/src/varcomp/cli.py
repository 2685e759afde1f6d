"""Command-line interface: ``varcomp {fit,fit-mvt,path,bench,simulate}``.

Exit codes: 0 success, 1 malformed input, 2 solver failure, 3 no
convergence within ``--max-iter`` (the result is still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bundle as bio
from .exceptions import VarCompError
from .mm import SolverConfig, fit, fit_reml, fit_two_vc
from .model import VarCompProblem
from .multivariate import MultiVarCompProblem, fit_mvt, fit_mvt_two_vc
from .path import default_grid, entry_ranking, lambda_max, path_csv, ranking_markdown, solution_path
from .penalized import PenaltySpec
from .simulation import (
    METHODS,
    AnovaDesign,
    GeneticDesign,
    aggregates_markdown,
    gen_planted,
    records_csv,
    run_experiment,
)

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class InputError(Exception):
    """Bad flags or files; maps to exit code 1."""


class SolverError(Exception):
    """Numerical failure during fitting; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def parse_penalty(text: str, multivariate: bool = False) -> PenaltySpec:
    """``none``, ``ridge:LAM``, ``lasso:LAM`` or ``map:FILE``."""
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    try:
        if kind == "none" and not arg:
            return PenaltySpec.none()
        if kind in ("ridge", "lasso") and not multivariate:
            return getattr(PenaltySpec, kind)(float(arg))
        if kind == "map" and arg:
            prior = _load_json(arg)
            if multivariate:
                return PenaltySpec.map_iw(prior["nu"], prior["psi"])
            return PenaltySpec.map_ig(prior["alpha"], prior["gamma"])
    except (KeyError, TypeError) as exc:
        raise InputError(f"prior file is missing field {exc}") from None
    except ValueError as exc:
        raise InputError(f"bad penalty {text!r}: {exc}") from None
    allowed = "none, map:FILE" if multivariate else "none, ridge:LAM, lasso:LAM, map:FILE"
    raise InputError(f"bad penalty {text!r}; expected one of {allowed}")


def _config(args, penalty=None, accelerate=False) -> SolverConfig:
    try:
        return SolverConfig(strategy=getattr(args, "method", "mm").upper(), accelerate=accelerate,
                            rel_tol=args.tol, max_iter=args.max_iter, penalty=penalty)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load(args) -> bio.Bundle:
    return bio.load_bundle(args.bundle, y=args.y, X=args.X, manifest=args.manifest)


def _emit(payload, out):
    text = bio.dumps(payload)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _status(res) -> int:
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def _run_fit(fn, *a):
    try:
        return fn(*a)
    except VarCompError as exc:
        raise SolverError(f"{type(exc).__name__}: {exc}") from None


def cmd_fit(args) -> int:
    data = _load(args)
    if data.d != 1:
        raise InputError(f"response has {data.d} columns; use fit-mvt for multivariate data")
    problem = VarCompProblem(data.y[:, 0], data.X, tuple(data.V))
    config = _config(args, parse_penalty(args.penalty), args.accelerate)
    try:
        config.penalty.check_size(problem.m)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if args.reml:
        if args.fast_2vc:
            raise InputError("--fast-2vc cannot be combined with --reml")
        res = _run_fit(fit_reml, problem, config)
    elif args.fast_2vc:
        if problem.m != 2:
            raise InputError("--fast-2vc needs exactly two covariance bases")
        res = _run_fit(fit_two_vc, problem, config)
    else:
        res = _run_fit(fit, problem, config)
    payload = {
        "model": "univariate",
        "method": args.method.lower(),
        "accelerate": bool(args.accelerate),
        "reml": bool(args.reml),
        "components": data.names,
        "beta": res.params.beta,
        "sigma2": res.params.sigma2,
        "loglik": res.loglik,
        "objective": res.objective,
        "iterations": res.iterations,
        "kkt_residual": res.trace.kkt_residual,
        "converged": res.converged,
    }
    if args.trace:
        payload["trace"] = res.trace.objective
    _emit(payload, args.out)
    return _status(res)


def cmd_fit_mvt(args) -> int:
    data = _load(args)
    problem = MultiVarCompProblem(data.y, data.X, tuple(data.V))
    config = _config(args, parse_penalty(args.penalty, multivariate=True))
    gamma_init = None
    if args.gamma_init:
        raw = _load_json(args.gamma_init)
        try:
            gamma_init = [np.asarray(G, dtype=float) for G in raw]
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad initial covariance matrices: {exc}") from None
        if len(gamma_init) != problem.m or any(G.shape != (problem.d, problem.d) for G in gamma_init):
            raise InputError(f"initial covariances must be {problem.m} matrices of shape "
                             f"{problem.d}x{problem.d}")
    if config.penalty.active:
        if config.penalty.nu.shape[0] != problem.m:
            raise InputError(f"prior file gives {config.penalty.nu.shape[0]} priors for "
                             f"{problem.m} components")
        if any(P.shape != (problem.d, problem.d) for P in config.penalty.psi):
            raise InputError(f"prior scale matrices must be {problem.d}x{problem.d}")
    if args.fast_2vc:
        if problem.m != 2:
            raise InputError("--fast-2vc needs exactly two covariance bases")
        res = _run_fit(fit_mvt_two_vc, problem, config, gamma_init)
    else:
        res = _run_fit(fit_mvt, problem, config, gamma_init)
    payload = {
        "model": "multivariate",
        "components": data.names,
        "B": res.params.B,
        "Gamma": [G for G in res.params.Gamma],
        "loglik": res.loglik,
        "objective": res.objective,
        "iterations": res.iterations,
        "kkt_residual": res.trace.kkt_residual,
        "converged": res.converged,
    }
    if args.trace:
        payload["trace"] = res.trace.objective
    _emit(payload, args.out)
    return _status(res)


def _parse_grid(text: str):
    if text == "auto":
        return None
    if text.startswith("@"):
        data, _ = bio.read_csv_matrix(text[1:])
        return data.ravel()
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise InputError(f"bad lambda grid {text!r}") from None


def _parse_index_list(text, m):
    try:
        idx = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"bad component list {text!r}") from None
    if any(i < 0 or i >= m for i in idx):
        raise InputError(f"component indices must lie in 0..{m - 1}")
    mask = np.zeros(m, dtype=bool)
    mask[idx] = True
    return mask


def cmd_path(args) -> int:
    data = _load(args)
    if data.d != 1:
        raise InputError("solution paths need a single response column")
    problem = VarCompProblem(data.y[:, 0], data.X, tuple(data.V))
    config = _config(args)
    mask = None if args.penalize is None else _parse_index_list(args.penalize, problem.m)
    grid = _parse_grid(args.lambda_grid)
    lam_max = None
    if grid is None:
        if args.n_lambda < 2:
            raise InputError("--n-lambda must be >= 2")
        if not 0 < args.lambda_ratio < 1:
            raise InputError("--lambda-ratio must lie in (0, 1)")
        lam_max = _run_fit(lambda_max, problem, config, mask)
        grid = default_grid(lam_max, args.n_lambda, args.lambda_ratio)
    try:
        records = solution_path(problem, grid, config, mask)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    ranking = _run_fit(entry_ranking, records, problem, mask, config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "path.csv").write_text(path_csv(records))
    for r in ranking:
        r["name"] = data.names[r["component"]]
    payload = {
        "lambda_max": lam_max,
        "lambda_grid": [r.lam for r in records],
        "components": data.names,
        "ranking": ranking,
        "points": [{"lambda": r.lam, "sigma2": r.sigma2, "iterations": r.iterations,
                    "converged": r.converged, "error": r.error} for r in records],
    }
    (out / "ranking.json").write_text(bio.dumps(payload))
    (out / "ranking.md").write_text(ranking_markdown(ranking, data.names))
    sys.stdout.write(ranking_markdown(ranking, data.names))
    if any(r.error for r in records):
        for r in records:
            if r.error:
                print(f"lambda={r.lam!r}: {r.error}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK if all(r.converged for r in records) else EXIT_NOT_CONVERGED


def parse_design(text: str, seed: int = 0):
    """``anova:a,b,c,ratio`` or ``genetic:n,ratio``."""
    kind, _, arg = text.partition(":")
    try:
        vals = [float(v) for v in arg.split(",")]
        if kind == "anova" and len(vals) == 4:
            a, b, c, ratio = vals
            if not all(float(v).is_integer() for v in (a, b, c)):
                raise ValueError("level counts must be integers")
            return AnovaDesign(int(a), int(b), int(c), ratio, seed=seed)
        if kind == "genetic" and len(vals) == 2 and vals[0].is_integer():
            return GeneticDesign(int(vals[0]), vals[1], seed=seed)
    except ValueError as exc:
        raise InputError(f"bad design {text!r}: {exc}") from None
    raise InputError(f"bad design {text!r}; expected anova:a,b,c,ratio or genetic:n,ratio")


def _parse_methods(text):
    lookup = {k.lower(): k for k in METHODS}
    names = [v.strip().lower() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in lookup]
    if bad or not names:
        raise InputError(f"unknown method(s) {bad}; choose from {sorted(lookup)}")
    return [lookup[v] for v in names]


def cmd_bench(args) -> int:
    designs = [parse_design(d, args.seed) for d in args.design]
    methods = _parse_methods(args.methods)
    if args.replicates < 1:
        raise InputError("--replicates must be >= 1")
    config = _config(args)
    records, aggs = run_experiment(designs, args.replicates, methods, config,
                                   threads=args.threads)
    table = aggregates_markdown(aggs, methods)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.csv").write_text(records_csv(records))
        (out / "summary.md").write_text(table)
    sys.stdout.write(table)
    failed = sum(r.failed for r in records)
    if failed:
        print(f"{failed} run(s) failed", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    kind = args.design.partition(":")[0]
    names = None
    extra = {}
    if kind == "planted":
        try:
            n = int(args.design.partition(":")[2] or 100)
        except ValueError:
            raise InputError(f"bad design {args.design!r}; expected planted:n") from None
        problem, planted = gen_planted(args.seed, n=n)
        names = [f"candidate{i + 1}" for i in range(problem.m - 1)] + ["noise"]
        sigma2 = None
        extra["planted"] = planted
    else:
        design = parse_design(args.design, args.seed)
        problem, sigma2 = design.make(0)
        if kind == "anova":
            names = ["factorA", "factorB", "interaction", "noise"]
        else:
            names = ["kinship", "noise"]
    bio.write_bundle(args.out_dir, problem.y, problem.X, problem.V, names)
    truth = {"design": args.design, "seed": args.seed, "components": names,
             "sigma2": sigma2, **extra}
    (Path(args.out_dir) / "truth.json").write_text(bio.dumps(truth))
    return EXIT_OK


def _add_bundle_args(p):
    p.add_argument("bundle", nargs="?", help="bundle directory (y.csv, X.csv, manifest.txt)")
    p.add_argument("--y", help="response CSV (overrides the bundle default)")
    p.add_argument("--X", help="design CSV (overrides the bundle default)")
    p.add_argument("--manifest", help="manifest listing covariance CSVs in order")


def _add_solver_args(p):
    p.add_argument("--tol", type=float, default=1e-6, help="relative objective tolerance")
    p.add_argument("--max-iter", type=int, default=5000)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="varcomp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a univariate variance components model")
    _add_bundle_args(p)
    _add_solver_args(p)
    p.add_argument("--method", choices=["mm", "em", "fs", "hybrid"], default="mm")
    p.add_argument("--accelerate", action="store_true")
    p.add_argument("--reml", action="store_true")
    p.add_argument("--fast-2vc", action="store_true", help="two-component fast path")
    p.add_argument("--penalty", default="none", help="none | ridge:LAM | lasso:LAM | map:FILE")
    p.add_argument("--trace", action="store_true", help="include the objective trace")
    p.add_argument("--out", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-mvt", help="fit a multivariate variance components model")
    _add_bundle_args(p)
    _add_solver_args(p)
    p.add_argument("--fast-2vc", action="store_true", help="two-component fast path")
    p.add_argument("--penalty", default="none", help="none | map:FILE (inverse Wishart)")
    p.add_argument("--gamma-init", help="JSON list of initial d x d covariance matrices")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_mvt)

    p = sub.add_parser("path", help="lasso solution path and entry-order ranking")
    _add_bundle_args(p)
    _add_solver_args(p)
    p.add_argument("--lambda-grid", default="auto",
                   help="auto | comma-separated decreasing values | @file.csv")
    p.add_argument("--n-lambda", type=int, default=50)
    p.add_argument("--lambda-ratio", type=float, default=1e-3,
                   help="smallest over largest penalty for the auto grid")
    p.add_argument("--penalize", help="comma-separated component indices (default: non-identity)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_path)

    p = sub.add_parser("bench", help="compare solvers on simulated designs")
    p.add_argument("--design", action="append", required=True,
                   help="anova:a,b,c,ratio | genetic:n,ratio (repeatable)")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--methods", default="mm,amm,em,fs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: VARCOMP_THREADS or 1)")
    p.add_argument("--out-dir", help="write records.csv and summary.md here")
    _add_solver_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("simulate", help="write a simulated problem as a bundle")
    p.add_argument("--design", required=True, help="anova:a,b,c,ratio | genetic:n,ratio | planted:n")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"varcomp: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputError, ValueError) as exc:
        print(f"varcomp: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except VarCompError as exc:
        print(f"varcomp: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
