"""``lp-debias`` command line.

Exit status is 0 on success, 2 when some replicates failed but results were
written, and 1 on error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .debias import build_oracle, debiased_estimate
from .errors import LpDebiasError
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from .inference import (IID_ROWS, MULTINOMIAL, EstimatorConfig, Observation, SamplingModel,
                        bootstrap_ensemble, ci_entrywise)
from .lp import StandardFormLP, solve_lp
from .penalized import SolverOptions, duality_gap, solve_penalized
from .penalty import make_penalty
from .transport import OtProblem, ot_rhs_from_stat, ot_to_lp

EXIT_OK, EXIT_ERROR, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("lp_debias")


def parse_penalty(text: str):
    try:
        return make_penalty(text)
    except (LpDebiasError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _read_csv(path) -> np.ndarray:
    """Numeric CSV; a non-numeric first line is taken as a header."""
    lines = Path(path).read_text().splitlines()
    rows = [ln for ln in lines if ln.strip()]
    if rows:
        try:
            [float(v) for v in rows[0].split(",")]
        except ValueError:
            rows = rows[1:]
    return np.array([[float(v) for v in ln.split(",")] for ln in rows], dtype=float)


def load_lp(path) -> StandardFormLP:
    """Directory holding ``A.csv``, ``b.csv``, ``c.csv``, or one CSV ``[A | b]``
    whose last row is ``[c | 0]``."""
    p = Path(path)
    if p.is_dir():
        A = _read_csv(p / "A.csv")
        b = _read_csv(p / "b.csv").ravel()
        c = _read_csv(p / "c.csv").ravel()
    else:
        M = _read_csv(p)
        if M.shape[0] < 2 or M.shape[1] < 2:
            raise LpDebiasError(f"{p}: augmented LP needs at least two rows and columns")
        A, b, c = M[:-1, :-1], M[:-1, -1], M[-1, :-1]
    return StandardFormLP(A, b, c)


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_solve(args) -> int:
    lp = load_lp(args.lp)
    if args.penalty is None:
        sol = solve_lp(lp)
        _emit(sol.to_dict(), args.out)
        return EXIT_OK if sol.status == "optimal" else EXIT_ERROR
    sol = solve_penalized(lp, args.penalty, args.r, SolverOptions(tol=args.tol),
                          method=args.method)
    doc = sol.to_dict()
    doc["duality_gap"] = duality_gap(lp, args.penalty, args.r, sol)
    _emit(doc, args.out)
    return EXIT_OK


def cmd_debias(args) -> int:
    lp = load_lp(args.lp)
    est = debiased_estimate(lp, args.penalty, args.r, SolverOptions(tol=args.tol),
                            method=args.method)
    doc = est.to_dict()
    if args.oracle:
        oracle = build_oracle(lp, args.penalty)
        doc["oracle"] = {
            "x_star": oracle.x_star.tolist(),
            "d_star": oracle.d_star.tolist(),
            "x_hat_error": float(np.max(np.abs(est.x_hat - oracle.x_star))),
            "d_hat_error": float(np.max(np.abs(est.d_hat - oracle.d_star))),
        }
    _emit(doc, args.out)
    return EXIT_OK


def _bootstrap_problem(args):
    """``(EstimatorConfig, Observation)`` for the chosen sampling model."""
    if args.model == MULTINOMIAL:
        if not (args.marginals and args.cost and args.n):
            raise LpDebiasError("multinomial model needs --marginals, --cost and --n")
        rows = _read_csv(args.marginals)
        if rows.shape[0] != 2:
            raise LpDebiasError("--marginals must hold two rows: t_n and s_n")
        t_n, s_n = rows[0], rows[1]
        lp = ot_to_lp(OtProblem(t_n, s_n, _read_csv(args.cost)))
        model = SamplingModel.multinomial([t_n, s_n], args.n, seed=args.seed)
        return lp, ot_rhs_from_stat, Observation(model, freqs=(t_n, s_n)), args.n
    if not (args.lp and args.data):
        raise LpDebiasError("iid_rows model needs --lp and --data")
    lp = load_lp(args.lp)
    D = _read_csv(args.data)
    if D.shape[1] != lp.k:
        raise LpDebiasError(f"data has {D.shape[1]} columns but the LP has {lp.k} rows")
    model = SamplingModel.iid_rows(D, seed=args.seed)
    return lp, (lambda stat: stat), Observation(model, data=D), D.shape[0]


def cmd_bootstrap(args) -> int:
    """Entrywise intervals from the observed frequencies or data rows."""
    lp, rhs, obs, n = _bootstrap_problem(args)
    r_n = args.r if args.r else args.r0 / n ** (1 / 3)
    cfg = EstimatorConfig(lp, args.penalty, r_n, rhs)
    ens = bootstrap_ensemble(obs, cfg, args.B, args.seed)
    ci = ci_entrywise(ens, n, args.alpha)
    _emit({"model": args.model, "r_n": r_n, "n": n, "B": args.B, "seed": args.seed,
           "estimate": ens.center.tolist(), "ci": ci.to_dict(),
           "failed_replicates": ens.failed}, args.out)
    return EXIT_PARTIAL if ens.failed else EXIT_OK


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig(
        experiment=args.command, n=args.n or [], B=args.B, R=args.R,
        r0=args.r0 or [1.0], penalty=args.penalty or [], L=args.L, seed=args.seed,
        alpha=args.alpha, force=args.force, instance=args.instance or "",
        lambdas=args.lambdas or [], images=args.images or [], data=args.data or "",
        costs=args.costs or "")
    bundle = run_experiment(cfg)
    out = bundle.write(args.out)
    log.info("wrote %s", out)
    return EXIT_PARTIAL if bundle.failures else EXIT_OK


def _common_solver(p):
    p.add_argument("--lp", required=True,
                   help="directory with A.csv, b.csv, c.csv or an augmented CSV [A|b; c|0]")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--method", choices=("auto", "dual", "primal"), default="auto")
    p.add_argument("--out", help="write JSON here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lp-debias",
                                     description="Debiased penalized LP estimation and inference.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve an LP, or its penalized version with --penalty")
    _common_solver(p)
    p.add_argument("--penalty", type=parse_penalty, help="log, exp, sq or invpoly:ALPHA")
    p.add_argument("--r", "-r", type=float, default=1e-2, help="penalty strength")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("debias", help="two-point extrapolated estimate at strength r")
    _common_solver(p)
    p.add_argument("--penalty", type=parse_penalty, default="log")
    p.add_argument("--r", "-r", type=float, required=True)
    p.add_argument("--oracle", action="store_true", help="also report the expansion oracle")
    p.set_defaults(func=cmd_debias)

    p = sub.add_parser("bootstrap", help="entrywise bootstrap intervals")
    p.add_argument("--model", choices=(MULTINOMIAL, IID_ROWS), default=IID_ROWS)
    p.add_argument("--lp", help="iid_rows: LP whose right-hand side is the data row mean")
    p.add_argument("--data", help="iid_rows: CSV with one observation per row")
    p.add_argument("--marginals", help="multinomial: CSV with rows t_n and s_n")
    p.add_argument("--cost", help="multinomial: transport cost matrix CSV")
    p.add_argument("--n", type=int, help="multinomial: sample size behind the marginals")
    p.add_argument("--penalty", type=parse_penalty, default="log")
    p.add_argument("--r", "-r", type=float, help="fixed strength (default r0 / n^(1/3))")
    p.add_argument("--r0", type=float, default=1.0)
    p.add_argument("--B", "-B", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bootstrap)

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--n", "-n", type=int, nargs="+", help="sample size(s)")
        p.add_argument("--B", "-B", type=int, default=200, help="bootstrap replicates")
        p.add_argument("--R", "-R", type=int, default=200, help="Monte-Carlo replicates")
        p.add_argument("--r0", type=float, nargs="+")
        p.add_argument("--penalty", nargs="+",
                       help="penalty kinds: log, exp, sq, invpoly:ALPHA")
        p.add_argument("--L", "-L", type=int, default=4, help="grid side")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--alpha", type=float, default=0.05)
        p.add_argument("--force", action="store_true", help="lift desk-scale limits")
        p.add_argument("--instance", help="simdegenerate: 2x2 or grid")
        p.add_argument("--lambdas", type=float, nargs="+", help="entropic_compare profile grid")
        p.add_argument("--images", nargs=2, metavar="PGM", help="coloc: two PGM images")
        p.add_argument("--data", help="rebalance: daily net-flow CSV (rows days, cols stations)")
        p.add_argument("--costs", help="rebalance: station cost matrix CSV")
        p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in EXPERIMENTS and args.penalty:
            for text in args.penalty:
                make_penalty(text)
        return args.func(args)
    except (LpDebiasError, OSError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"lp-debias: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
