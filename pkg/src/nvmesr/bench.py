"""Experiment matrices over backend x proc and their CSV output."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import ClusterConfig, FaultPlan, simulate
from .errors import CapacityError, ESRError, InvalidConfigError
from .ledger import OverheadLedger, account
from .linalg import CsrMatrix, gen_poisson_7pt
from .pcg import RECOVERY_MODES, SolveConfig

CSV_COLUMNS = (
    "backend", "proc", "c", "n", "iter_converge", "persist_simtime", "wire_bytes",
    "ram_red_bytes", "nvm_resident_bytes", "nvm_written_bytes", "recovered", "status",
)


@dataclass(frozen=True, eq=False)
class Problem:
    A: CsrMatrix
    b: np.ndarray
    name: str = "custom"

    @property
    def n(self) -> int:
        return self.A.n_rows

    @classmethod
    def from_matrix(cls, A: CsrMatrix, rhs: str = "ones", seed: int = 0, name: str = "custom") -> "Problem":
        if rhs == "ones":
            b = np.ones(A.n_rows)
        elif rhs == "random":
            b = np.random.default_rng(seed).uniform(-1.0, 1.0, A.n_rows)
        else:
            raise InvalidConfigError(f"unknown right-hand side {rhs!r}")
        return cls(A, b, name)

    @classmethod
    def poisson(cls, nx: int, ny: int, nz: int, rhs: str = "ones", seed: int = 0) -> "Problem":
        return cls.from_matrix(gen_poisson_7pt(nx, ny, nz), rhs, seed, f"poisson{nx}x{ny}x{nz}")


@dataclass(frozen=True)
class ExperimentSpec:
    grid: tuple[int, int, int]
    procs: tuple[int, ...]
    backends: tuple[str, ...]
    c: int | str = 1  # or "full" for proc-1
    persist_period: int = 5
    faults: tuple[str, ...] = ()
    tol: float = 1e-8
    max_iter: int = 1000
    seed: int = 0
    trials: int = 1
    rhs: str = "ones"
    M_V: int | None = None
    output: str = "results.csv"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown experiment fields {sorted(unknown)}")
        try:
            spec = cls(
                grid=tuple(int(v) for v in d["grid"]),
                procs=tuple(int(p) for p in d["procs"]),
                backends=tuple(d["backends"]),
                c=d.get("c", 1),
                persist_period=int(d.get("persist_period", 5)),
                faults=tuple(d.get("faults", ())),
                tol=float(d.get("tol", 1e-8)),
                max_iter=int(d.get("max_iter", 1000)),
                seed=int(d.get("seed", 0)),
                trials=int(d.get("trials", 1)),
                rhs=d.get("rhs", "ones"),
                M_V=d.get("M_V"),
                output=d.get("output", "results.csv"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfigError(f"bad experiment spec: {exc}") from None
        return spec.validate()

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfigError(f"cannot read experiment spec {path}: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidConfigError("experiment spec must be a JSON object")
        return cls.from_dict(data)

    def validate(self) -> "ExperimentSpec":
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise InvalidConfigError(f"grid must be three positive sizes, got {self.grid}")
        if not self.procs or min(self.procs) < 1:
            raise InvalidConfigError("procs must be a non-empty list of positive counts")
        bad = [m for m in self.backends if m not in RECOVERY_MODES]
        if bad or not self.backends:
            raise InvalidConfigError(f"unknown backends {bad}; choose from {RECOVERY_MODES}")
        if not (self.c == "full" or (isinstance(self.c, int) and self.c >= 0)):
            raise InvalidConfigError(f"c must be a non-negative integer or 'full', got {self.c!r}")
        if self.trials < 1:
            raise InvalidConfigError("trials must be at least 1")
        FaultPlan.parse(list(self.faults))
        return self

    def c_for(self, proc: int) -> int:
        return proc - 1 if self.c == "full" else int(self.c)


def ledger_matches(measured: OverheadLedger, predicted: OverheadLedger) -> list[str]:
    """Names of exactly-predicted fields where the two ledgers disagree."""
    m, p = measured.exact_view(), predicted.exact_view()
    return [k for k in m if m[k] != p[k]]


def run_row(spec: ExperimentSpec, problem: Problem, mode: str, proc: int) -> dict:
    c = spec.c_for(proc)
    row = {"backend": mode, "proc": proc, "c": c, "n": problem.n, "iter_converge": "",
           "persist_simtime": "", "wire_bytes": "", "ram_red_bytes": "", "nvm_resident_bytes": "",
           "nvm_written_bytes": "", "recovered": "", "status": ""}
    try:
        solve = SolveConfig(tol=spec.tol, max_iter=spec.max_iter, persist_period=spec.persist_period,
                            recovery_mode=mode, c=c).validate(proc)
        cluster = ClusterConfig(proc=proc, seed=spec.seed, M_V=spec.M_V)
        faults = FaultPlan.parse(list(spec.faults)) if mode != "none" else FaultPlan()
        if problem.n < proc:
            raise InvalidConfigError(f"n={problem.n} rows cannot be split over {proc} ranks")
        report = simulate(problem.A, problem.b, solve, cluster, faults)
    except CapacityError as exc:
        row["status"] = f"skipped: capacity ({exc})"
        return row
    except (InvalidConfigError, ESRError) as exc:
        row["status"] = f"skipped: {exc}"
        return row
    led = report.ledger
    row["recovered"] = "true" if report.recovered else "false"
    row["status"] = report.status
    if report.solution is not None and report.solution.converged:
        row["iter_converge"] = report.iterations
    if led is not None:
        row["persist_simtime"] = "" if led.persist_simtime is None else f"{led.persist_simtime:.6f}"
        row["wire_bytes"] = led.wire_bytes_per_persist
        row["ram_red_bytes"] = led.ram_redundancy_bytes
        row["nvm_resident_bytes"] = led.nvm_resident_bytes
        row["nvm_written_bytes"] = led.nvm_written_bytes_per_persist
        if report.status != "unrecoverable" and (mode == "none" or led.persist_iterations >= 2):
            predicted = account(problem.n, proc, c, mode, nnz=problem.A.nnz)
            diff = ledger_matches(led, predicted)
            if diff:
                row["status"] = f"ledger_mismatch: {','.join(diff)}"
    return row


def run_experiments(spec: ExperimentSpec, out_dir) -> Path:
    """Run every (backend, proc, trial) combination and write one CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for trial in range(spec.trials):
        problem = Problem.poisson(*spec.grid, rhs=spec.rhs, seed=spec.seed + trial)
        for proc in spec.procs:
            for mode in spec.backends:
                rows.append(run_row(spec, problem, mode, proc))
    path = out_dir / spec.output
    path.write_text(rows_to_csv(rows))
    return path


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
