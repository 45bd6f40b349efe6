"""Exact state reconstruction for distributed PCG, with in-memory and
NVM-backed recovery data, on a deterministic cluster simulator."""

from .cluster import ClusterConfig, FaultEvent, FaultPlan, RunReport, SimComm, simulate
from .esr import RecoveryRecord, RedundancyStore, aspmv, holders_for, reconstruct
from .ledger import OverheadLedger, account
from .linalg import CsrMatrix, Partition, Preconditioner, cholesky_solve, dot, gen_poisson_7pt, spmv, submatrix
from .pcg import SolveConfig, SolverState, pcg_step, run

__all__ = [
    "ClusterConfig", "CsrMatrix", "FaultEvent", "FaultPlan", "OverheadLedger", "Partition",
    "Preconditioner", "RecoveryRecord", "RedundancyStore", "RunReport", "SimComm", "SolveConfig",
    "SolverState", "account", "aspmv", "cholesky_solve", "dot", "gen_poisson_7pt", "holders_for",
    "pcg_step", "reconstruct", "run", "simulate", "spmv", "submatrix",
]
__version__ = "0.1.0"
