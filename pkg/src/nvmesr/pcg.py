"""Distributed preconditioned conjugate gradient over row-block slices.

Every rank holds slices of x, r, z, p over its block; the scalars alpha, beta
and r'z are global and identical on all ranks.  Arithmetic goes through a
communicator (``comm.matvec`` and ``comm.allreduce_dot``) whose reductions
have a fixed order, so the iterate sequence does not depend on the number of
ranks beyond the partition itself, and replaying from a restored state gives
the same bits.

Fault tolerance is plugged in through :class:`Hooks`.  The default hooks are
arithmetically inert; recovery-aware hooks live in ``cluster``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BreakdownError, InvalidConfigError, RankFailure
from .linalg import CsrMatrix, Partition, Preconditioner

RECOVERY_MODES = ("none", "esr_inmem", "nvm_local", "nvm_prd")


@dataclass
class SolverState:
    j: int
    x: np.ndarray
    r: np.ndarray
    z: np.ndarray
    p: np.ndarray
    alpha: float = 0.0
    beta_prev: float = 0.0
    rz: float = 0.0

    def copy(self) -> "SolverState":
        return replace(self, x=self.x.copy(), r=self.r.copy(), z=self.z.copy(), p=self.p.copy())

    @property
    def nbytes(self) -> int:
        return 8 * (len(self.x) + len(self.r) + len(self.z) + len(self.p))


@dataclass(frozen=True)
class SolveConfig:
    tol: float = 1e-8
    max_iter: int = 1000
    persist_period: int = 1
    recovery_mode: str = "none"
    c: int = 0
    preconditioner: str = "jacobi"
    true_residual_every: int = 10

    def validate(self, proc: int | None = None) -> "SolveConfig":
        if not self.tol >= 0:
            raise InvalidConfigError(f"tol must be non-negative, got {self.tol}")
        if self.max_iter < 0:
            raise InvalidConfigError("max_iter must be non-negative")
        if self.persist_period < 1:
            raise InvalidConfigError("persist_period must be at least 1")
        if self.recovery_mode not in RECOVERY_MODES:
            raise InvalidConfigError(f"unknown recovery mode {self.recovery_mode!r}")
        if self.preconditioner not in ("jacobi", "identity"):
            raise InvalidConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if self.true_residual_every < 1:
            raise InvalidConfigError("true_residual_every must be at least 1")
        if self.c < 0 or (proc is not None and self.c >= proc):
            raise InvalidConfigError(f"need 0 <= c < proc, got c={self.c}, proc={proc}")
        return self


def is_persist_iteration(j: int, period: int) -> bool:
    """Persistence happens at k*period and k*period + 1 for k >= 1."""
    return j >= period and (j % period == 0 or (j - 1) % period == 0 and j - 1 >= period)


def completes_pair(j: int, period: int) -> bool:
    return is_persist_iteration(j, period) and is_persist_iteration(j - 1, period)


class Hooks:
    """Callbacks around each iteration; the defaults leave the solver untouched."""

    def on_start(self, states: list[SolverState], comm) -> None:
        pass

    def matvec(self, j: int, states: list[SolverState], comm) -> list[np.ndarray]:
        return comm.matvec([s.p for s in states])

    def after_matvec(self, j: int, states: list[SolverState]) -> None:
        pass

    def after_step(self, states: list[SolverState]) -> None:
        pass

    def recover(self, failure: RankFailure, states: list[SolverState]) -> list[SolverState]:
        raise failure


@dataclass(frozen=True)
class TraceEntry:
    j: int
    residual: float  # relative, as used for the convergence test
    alpha: float
    beta: float
    rz: float
    digest: str  # of the assembled x, r, p

    def key(self) -> tuple:
        return (self.j, self.residual, self.alpha, self.beta, self.rz, self.digest)


@dataclass
class Solution:
    x: np.ndarray
    iterations: int
    converged: bool
    rel_residual: float
    trace: list[TraceEntry]
    pairs: list[tuple[int, int]] = field(default_factory=list)
    history: dict | None = None
    ledger: object = None

    @property
    def status(self) -> str:
        return "converged" if self.converged else "max_iter"


def init_states(A: CsrMatrix, b, partition: Partition, comm, dinv_slices, x0=None) -> list[SolverState]:
    n = partition.n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    xs = partition.split(x)
    bs = partition.split(b)
    Ax = comm.matvec(xs)
    states = []
    for s in range(partition.proc):
        r = bs[s] - Ax[s]
        z = dinv_slices[s] * r
        states.append(SolverState(0, xs[s], r, z, z.copy()))
    rz = comm.allreduce_dot([st.r for st in states], [st.z for st in states])
    for st in states:
        st.rz = rz
    return states


def pcg_step(states: list[SolverState], comm, dinv_slices, hooks: Hooks | None = None) -> list[SolverState]:
    """Advance every rank from iteration j to j+1 (in place) and return the states."""
    hooks = hooks or Hooks()
    j = states[0].j
    Ap = hooks.matvec(j, states, comm)
    hooks.after_matvec(j, states)
    pAp = comm.allreduce_dot([s.p for s in states], Ap)
    rz = states[0].rz
    if not math.isfinite(pAp) or not math.isfinite(rz):
        raise BreakdownError(f"non-finite scalar at iteration {j}")
    if pAp <= 0.0:
        raise BreakdownError(f"p'Ap = {pAp} is not positive at iteration {j}; A is not SPD")
    alpha = rz / pAp
    for s, st in enumerate(states):
        st.x = st.x + alpha * st.p
        st.r = st.r - alpha * Ap[s]
        st.z = dinv_slices[s] * st.r
    rz_new = comm.allreduce_dot([s.r for s in states], [s.z for s in states])
    if not math.isfinite(rz_new):
        raise BreakdownError(f"r'z is not finite at iteration {j + 1}")
    beta = rz_new / rz if rz != 0.0 else 0.0
    for st in states:
        st.p = st.z + beta * st.p
        st.alpha = alpha
        st.beta_prev = beta
        st.rz = rz_new
        st.j = j + 1
    hooks.after_step(states)
    return states


def state_digest(states: list[SolverState]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in ("x", "r", "p"):
        for st in states:
            h.update(np.ascontiguousarray(getattr(st, name), dtype="<f8").tobytes())
    return h.hexdigest()


def assemble_state(states: list[SolverState]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([getattr(s, k) for s in states]) for k in ("x", "r", "z", "p")}


def _residual(j: int, states, comm, b_slices, bnorm: float, every: int) -> float:
    if j % every == 0:
        Ax = comm.matvec([s.x for s in states])
        res = [b_slices[s] - Ax[s] for s in range(len(states))]
    else:
        res = [s.r for s in states]
    rr = comm.allreduce_dot(res, res)
    norm = math.sqrt(rr)
    return norm / bnorm if bnorm > 0 else norm


def run(config: SolveConfig, A: CsrMatrix, b, *, proc: int = 1, hooks: Hooks | None = None,
        comm=None, x0=None, record_states: bool = False) -> Solution:
    """Iterate until the relative residual reaches ``config.tol`` or ``max_iter``.

    When ``hooks`` is omitted and a recovery mode is configured, a crash-free
    cluster orchestrator with default topology is attached so that the
    persistence traffic and its ledger are still produced.
    """
    config.validate(proc)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (A.n_rows,):
        raise InvalidConfigError(f"right-hand side of shape {b.shape} for {A.n_rows} rows")
    partition = Partition.balanced(A.n_rows, proc)
    if comm is None:
        from .cluster import SimComm
        comm = SimComm(A, partition)
    precond = Preconditioner.build(config.preconditioner, A)
    dinv = partition.split(precond.diag_inverse)
    if hooks is None:
        if config.recovery_mode == "none":
            hooks = Hooks()
        else:
            from .cluster import ClusterConfig, Orchestrator
            hooks = Orchestrator(A, b, config, ClusterConfig(proc=proc), comm=comm)

    b_slices = partition.split(b)
    bnorm = math.sqrt(comm.allreduce_dot(b_slices, b_slices))
    states = init_states(A, b, partition, comm, dinv, x0)
    hooks.on_start(states, comm)

    def record(states) -> None:
        st = states[0]
        res = _residual(st.j, states, comm, b_slices, bnorm, config.true_residual_every)
        trace.append(TraceEntry(st.j, res, st.alpha, st.beta_prev, st.rz, state_digest(states)))
        if history is not None:
            history[st.j] = assemble_state(states)

    trace: list[TraceEntry] = []
    history: dict | None = {} if record_states else None
    record(states)
    while trace[-1].residual > config.tol and states[0].j < config.max_iter:
        try:
            states = pcg_step(states, comm, dinv, hooks)
        except RankFailure as failure:
            states = hooks.recover(failure, states)
            J = states[0].j
            trace = [t for t in trace if t.j <= J]
            if history is not None:
                history = {k: v for k, v in history.items() if k < J}
            if not trace or trace[-1].j != J:
                record(states)
            elif history is not None:
                history[J] = assemble_state(states)
            continue
        record(states)

    x = partition.assemble([s.x for s in states])
    Ax = comm.matvec([s.x for s in states])
    res = [b_slices[s] - Ax[s] for s in range(proc)]
    true_norm = math.sqrt(comm.allreduce_dot(res, res))
    rel = true_norm / bnorm if bnorm > 0 else true_norm
    mode = config.recovery_mode
    pairs = []
    if mode != "none":
        pairs = [(t.j - 1, t.j) for t in trace if completes_pair(t.j, config.persist_period)]
    return Solution(x=x, iterations=states[0].j, converged=trace[-1].residual <= config.tol,
                    rel_residual=rel, trace=trace, pairs=pairs, history=history,
                    ledger=getattr(hooks, "ledger", None))
