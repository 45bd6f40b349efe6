"""Command line: ``nvmesr gen|solve|account|bench``.

Exit codes: 0 success, 2 run failed unrecoverably (or did not fit in
memory), 3 invalid configuration.  Times are simulated units, never
wall-clock.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import scipy.io
import scipy.sparse

from .bench import ExperimentSpec, Problem, run_experiments
from .cluster import ClusterConfig, FaultPlan, simulate
from .errors import CapacityError, ESRError, InvalidConfigError, PlacementError, ShapeError, SizeError
from .ledger import account
from .linalg import CsrMatrix, gen_poisson_7pt
from .pcg import RECOVERY_MODES, SolveConfig

EXIT_OK, EXIT_UNRECOVERABLE, EXIT_INVALID = 0, 2, 3


def write_matrix_market(A: CsrMatrix, path) -> None:
    sp = scipy.sparse.csr_matrix((A.values, A.col_indices, A.row_offsets), shape=A.shape)
    scipy.io.mmwrite(str(path), sp, symmetry="symmetric")


def read_matrix_market(path) -> CsrMatrix:
    sp = scipy.sparse.csr_matrix(scipy.io.mmread(str(path)))
    sp.sort_indices()
    sp.sum_duplicates()
    return CsrMatrix(sp.shape[0], sp.shape[1], sp.indptr, sp.indices, sp.data)


def _grid(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8,8,8, got {text!r}") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError("grid needs three sizes")
    return dims


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvmesr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a 7-point Poisson matrix in Matrix Market format")
    g.add_argument("nx", type=int)
    g.add_argument("ny", type=int)
    g.add_argument("nz", type=int)
    g.add_argument("out")

    s = sub.add_parser("solve", help="solve on the simulated cluster, optionally with faults")
    s.add_argument("--backend", choices=RECOVERY_MODES, default="none")
    s.add_argument("--proc", type=int, default=4)
    s.add_argument("--c", type=int, default=1)
    s.add_argument("--period", type=int, default=5)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fault", action="append", default=[], help='e.g. "9:compute:2" or "12:mid_persist@300:1,4"')
    s.add_argument("--grid", type=_grid, default=(8, 8, 8))
    s.add_argument("--matrix", help="Matrix Market file instead of --grid")
    s.add_argument("--rhs", choices=("ones", "random"), default="ones")
    s.add_argument("--mv", type=int, default=None, help="volatile memory capacity M_V in bytes")
    s.add_argument("--report", help="write the event log as JSON lines")

    a = sub.add_parser("account", help="closed-form memory and traffic ledger")
    a.add_argument("--n", type=int, required=True)
    a.add_argument("--proc", type=int, required=True)
    a.add_argument("--c", default="full", help="tolerance, or 'full' for proc-1")
    a.add_argument("--mode", choices=RECOVERY_MODES, required=True)
    a.add_argument("--nnz", type=int, default=None, help="stored entries (default 7n)")

    bn = sub.add_parser("bench", help="run an experiment matrix and write CSV")
    bn.add_argument("--spec", required=True)
    bn.add_argument("--out", required=True)
    return ap


def cmd_gen(args) -> int:
    A = gen_poisson_7pt(args.nx, args.ny, args.nz)
    write_matrix_market(A, args.out)
    print(f"wrote {A.n_rows}x{A.n_cols} matrix with {A.nnz} entries to {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    if args.matrix:
        problem = Problem.from_matrix(read_matrix_market(args.matrix), args.rhs, args.seed, args.matrix)
    else:
        problem = Problem.poisson(*args.grid, rhs=args.rhs, seed=args.seed)
    solve = SolveConfig(tol=args.tol, max_iter=args.max_iter, persist_period=args.period,
                        recovery_mode=args.backend, c=args.c)
    cluster = ClusterConfig(proc=args.proc, seed=args.seed, M_V=args.mv)
    plan = FaultPlan.parse(args.fault)
    report = simulate(problem.A, problem.b, solve, cluster, plan)
    if args.report:
        Path(args.report).write_text(report.to_jsonl())
    print(f"status: {report.status}")
    if report.solution is not None:
        print(f"iterations: {report.iterations}")
        print(f"relative residual: {report.solution.rel_residual:.3e}")
    for ev in report.recoveries:
        kind = "cold restart" if ev.cold_start else f"rolled back to j={ev.rollback_to}"
        print(f"recovery: ranks {list(ev.ranks)} failed at j={ev.failed_at} ({ev.phase}); {kind}")
    if report.ledger is not None and report.ledger.persist_simtime is not None:
        print(f"persist time per persistence iteration: {report.ledger.persist_simtime:.3f} simulated units")
    if report.error:
        print(f"error: {report.error}", file=sys.stderr)
    return EXIT_UNRECOVERABLE if report.status == "unrecoverable" else EXIT_OK


def cmd_account(args) -> int:
    c = args.proc - 1 if args.c == "full" else int(args.c)
    if not 0 <= c < args.proc:
        raise InvalidConfigError(f"need 0 <= c < proc, got c={c}")
    led = account(args.n, args.proc, c, args.mode, nnz=args.nnz)
    print(json.dumps(led.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    path = run_experiments(spec, args.out)
    print(f"wrote {path} (persist_simtime in simulated units)")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "account": cmd_account, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InvalidConfigError, PlacementError, ShapeError, SizeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CapacityError as exc:
        print(f"capacity exceeded: {exc}", file=sys.stderr)
        return EXIT_UNRECOVERABLE
    except ESRError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_UNRECOVERABLE


if __name__ == "__main__":
    sys.exit(main())
