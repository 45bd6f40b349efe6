"""Deterministic multi-rank simulator with fail-stop fault injection.

Ranks are logical: rank s always owns row block s, whatever node it runs on.
Communication is modelled, not performed: halo exchanges and reductions are
computed in a fixed order and charged to per-rank simulated clocks.

Recovery rolls every rank back to the last iteration J at which all ranks
completed a persistence pair.  Survivors restore a volatile snapshot taken
at J; failed ranks get their block rebuilt from the recovery records.
"""

from __future__ import annotations

import json
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ColdStartError,
    InvalidConfigError,
    PersistenceUnavailableError,
    RankFailure,
    UnavailableError,
    UnrecoverableError,
)
from .esr import aspmv, entry_payload, reconstruct
from .ledger import BACKEND_OF_MODE, DURABLE, OverheadLedger, account
from .linalg import CsrMatrix, Partition, Preconditioner, RowKernel, dot
from .pcg import (
    Hooks,
    Solution,
    SolveConfig,
    SolverState,
    completes_pair,
    init_states,
    is_persist_iteration,
    run,
)
from .pstore import PeerRamBackend, make_backend
from .rma import CostModel, SimClock

log = logging.getLogger(__name__)


# communication ---------------------------------------------------------------

class HaloPlan:
    """Which remote entries each rank's rows reference, and its local kernel.

    A rank's extended vector is [own slice | halo], the halo sorted by global
    index.  Columns are renumbered into that vector while keeping each row's
    stored order, so the local product adds terms exactly as the global one.
    """

    def __init__(self, A: CsrMatrix, partition: Partition):
        if A.n_rows != partition.n or A.n_cols != partition.n:
            raise InvalidConfigError("matrix and partition sizes differ")
        self.partition = partition
        starts = np.array([lo for lo, _ in partition.blocks])
        self.recv: list[dict[int, np.ndarray]] = []
        self.kernels: list[RowKernel] = []
        ro = A.row_offsets
        for s, (lo, hi) in enumerate(partition.blocks):
            seg = A.col_indices[ro[lo]:ro[hi]]
            outside = (seg < lo) | (seg >= hi)
            remote = np.unique(seg[outside])
            owners = np.searchsorted(starts, remote, side="right") - 1
            self.recv.append({int(src): remote[owners == src] for src in np.unique(owners)})
            local = np.where(outside, (hi - lo) + np.searchsorted(remote, seg), seg - lo)
            self.kernels.append(RowKernel(hi - lo, ro[lo:hi + 1] - ro[lo], local, A.values[ro[lo]:ro[hi]]))

    def halo_count(self, src: int, dst: int) -> int:
        idx = self.recv[dst].get(src)
        return 0 if idx is None else len(idx)

    def messages(self) -> list[tuple[int, int, int]]:
        """(src, dst, entries) for every halo message, ordered by dst then src."""
        return [(src, dst, len(idx)) for dst, srcs in enumerate(self.recv) for src, idx in sorted(srcs.items())]

    @property
    def nnz(self) -> int:
        return sum(k.nnz for k in self.kernels)


class SimComm:
    def __init__(self, A: CsrMatrix, partition: Partition, clock: SimClock | None = None,
                 cost: CostModel | None = None):
        self.partition = partition
        self.plan = HaloPlan(A, partition)
        self.clock = clock or SimClock()
        self.cost = cost or CostModel()
        self.dead: set[int] = set()
        self.halo_bytes = 0
        self.reductions = 0

    @property
    def proc(self) -> int:
        return self.partition.proc

    def _check(self, ranks=None) -> None:
        dead = self.dead if ranks is None else self.dead & set(ranks)
        if dead:
            raise RankFailure(dead, -1, "detected")

    def halo_exchange(self, slices) -> list[np.ndarray]:
        """Boundary values each rank needs, in the plan's order."""
        self._check()
        out = []
        for dst, srcs in enumerate(self.plan.recv):
            parts = []
            for src, idx in sorted(srcs.items()):
                lo = self.partition.blocks[src][0]
                parts.append(np.asarray(slices[src])[idx - lo])
                nbytes = 8 * len(idx)
                self.halo_bytes += nbytes
                arrive = self.clock.now(src) + self.cost.transfer(nbytes)
                self.clock.wait_until(dst, arrive)
            out.append(np.concatenate(parts) if parts else np.zeros(0))
        return out

    def matvec(self, slices) -> list[np.ndarray]:
        halo = self.halo_exchange(slices)
        return [k.apply(np.concatenate([np.asarray(slices[s], dtype=np.float64), halo[s]]))
                for s, k in enumerate(self.plan.kernels)]

    def allreduce_dot(self, us, vs) -> float:
        """Global inner product, summed rank by rank and index by index."""
        self._check()
        self.reductions += 1
        value = dot(np.concatenate(us), np.concatenate(vs))
        ranks = range(self.proc)
        t = max(self.clock.now(r) for r in ranks) + self.cost.latency * max(1, math.ceil(math.log2(self.proc)))
        for r in ranks:
            self.clock.wait_until(r, t)
        return value

    def gather(self, slices: dict[int, np.ndarray], root: int) -> int:
        nbytes = 0
        for src, v in sorted(slices.items()):
            nb = 8 * len(v)
            nbytes += nb
            self.clock.wait_until(root, self.clock.now(src) + self.cost.transfer(nb))
        return nbytes

    def kill(self, ranks) -> None:
        self.dead |= set(ranks)

    def revive(self, ranks) -> None:
        self.dead -= set(ranks)


# configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ClusterConfig:
    """Topology and capacities.

    With ``N`` unset the cluster gets exactly enough nodes of ``t`` slots for
    the compute ranks, ``spares`` free slots for replacements (default
    max(1, c)) and, in PRD mode, one extra node for the PRD rank.
    """

    proc: int
    t: int = 1
    N: int | None = None
    mapping: tuple[int, ...] | None = None
    spares: int | None = None
    seed: int = 0
    M_V: int | None = None
    M_NV: int | None = None
    node_recovery_delay: float = 50.0
    cost: CostModel = field(default_factory=CostModel)
    fsync: bool = False
    storage_dir: str | None = None
    prd_nodes: int = 1

    def validate(self, mode: str = "none", c: int = 0) -> "ClusterConfig":
        if self.proc < 1:
            raise InvalidConfigError("proc must be at least 1")
        if self.t < 1:
            raise InvalidConfigError("t must be at least 1")
        if self.prd_nodes != 1:
            raise InvalidConfigError("only a single PRD node is supported")
        if self.node_recovery_delay < 0:
            raise InvalidConfigError("node_recovery_delay must be non-negative")
        Topology.build(self, mode, c)
        return self


class Topology:
    def __init__(self, t: int, n_nodes: int, prd_node: int | None):
        self.t = t
        self.n_nodes = n_nodes
        self.prd_node = prd_node
        self.node_of: dict[int, int] = {}
        self.lost_slots = [0] * n_nodes

    @classmethod
    def build(cls, cfg: ClusterConfig, mode: str, c: int) -> "Topology":
        proc, t = cfg.proc, cfg.t
        prd = mode == "nvm_prd"
        compute_nodes = -(-proc // t)
        spares = max(1, c) if cfg.spares is None else cfg.spares
        needed = compute_nodes + int(prd)
        N = cfg.N if cfg.N is not None else needed + -(-spares // t)
        if N < needed:
            raise InvalidConfigError(f"proc={proc} ranks need at least {needed} nodes of {t} slots, got N={N}")
        if proc > t * (N - int(prd)):
            raise InvalidConfigError(f"proc={proc} exceeds t*N={t * (N - int(prd))} compute slots")
        topo = cls(t, N, N - 1 if prd else None)
        mapping = cfg.mapping or tuple(s // t for s in range(proc))
        if len(mapping) != proc:
            raise InvalidConfigError("mapping must name a node for every rank")
        for s, node in enumerate(mapping):
            if not 0 <= node < N or node == topo.prd_node:
                raise InvalidConfigError(f"rank {s} mapped to invalid node {node}")
            topo.node_of[s] = int(node)
        for node in range(N):
            if topo.used(node) > t:
                raise InvalidConfigError(f"node {node} holds more than t={t} ranks")
        if prd:
            topo.node_of[proc] = topo.prd_node
        return topo

    def used(self, node: int) -> int:
        return sum(1 for n in self.node_of.values() if n == node) + self.lost_slots[node]

    def lose(self, rank: int) -> None:
        node = self.node_of.pop(rank)
        self.lost_slots[node] += 1

    def spawn(self, rank: int) -> int:
        for node in range(self.n_nodes):
            if node != self.prd_node and self.used(node) < self.t:
                self.node_of[rank] = node
                return node
        raise UnrecoverableError(f"no free slot to respawn rank {rank}")

    def revive(self, rank: int, node: int) -> None:
        self.lost_slots[node] -= 1
        self.node_of[rank] = node


@dataclass(frozen=True)
class FaultEvent:
    iteration: int
    phase: str  # compute | mid_persist
    ranks: tuple[int, ...]
    cut: int | None = None

    @classmethod
    def parse(cls, text: str) -> "FaultEvent":
        """``"9:compute:2"`` or ``"12:mid_persist@300:1,4"``."""
        try:
            j, phase, ranks = text.strip().split(":")
            cut = None
            if "@" in phase:
                phase, cut_text = phase.split("@", 1)
                cut = int(cut_text)
            return cls(int(j), phase, tuple(sorted({int(r) for r in ranks.split(",")})), cut)
        except ValueError:
            raise InvalidConfigError(f"cannot parse fault {text!r}; expected j:phase:ranks") from None


@dataclass(frozen=True)
class FaultPlan:
    events: tuple[FaultEvent, ...] = ()

    @classmethod
    def parse(cls, spec) -> "FaultPlan":
        if spec is None:
            return cls()
        if isinstance(spec, str):
            spec = [s for s in spec.split(";") if s.strip()]
        return cls(tuple(e if isinstance(e, FaultEvent) else FaultEvent.parse(e) for e in spec))

    def validate(self, proc: int, mode: str, period: int) -> "FaultPlan":
        for ev in self.events:
            if ev.iteration < 0:
                raise InvalidConfigError(f"fault at negative iteration {ev.iteration}")
            if not ev.ranks:
                raise InvalidConfigError("fault event without victims")
            if any(r < 0 for r in ev.ranks):
                raise InvalidConfigError(f"invalid victim ranks {ev.ranks}")
            if mode == "nvm_prd" and proc in ev.ranks:
                raise InvalidConfigError("the PRD rank cannot be a victim; it is a single point of failure")
            if any(r >= proc for r in ev.ranks):
                raise InvalidConfigError(f"victims {ev.ranks} are not compute ranks (proc={proc})")
            if ev.phase == "compute":
                if ev.cut is not None:
                    raise InvalidConfigError("a cut point only applies to mid_persist faults")
            elif ev.phase == "mid_persist":
                if mode not in DURABLE:
                    raise InvalidConfigError(f"mid_persist faults need a durable backend, not {mode}")
                if not is_persist_iteration(ev.iteration, period):
                    raise InvalidConfigError(f"iteration {ev.iteration} is not a persistence iteration")
                if ev.cut is None or ev.cut < 0:
                    raise InvalidConfigError("mid_persist needs a non-negative cut point, e.g. mid_persist@300")
            else:
                raise InvalidConfigError(f"unknown fault phase {ev.phase!r}")
        return self


# reports -----------------------------------------------------------------

@dataclass
class RecoveryEvent:
    failed_at: int
    phase: str
    ranks: tuple[int, ...]
    rollback_to: int
    cold_start: bool
    reconstructed: dict = field(default_factory=dict)  # rank -> {x, r, p, z}
    nodes: dict = field(default_factory=dict)  # rank -> node after replacement
    simtime: float = 0.0


@dataclass
class RunReport:
    status: str
    solution: Solution | None
    events: list[dict]
    recoveries: list[RecoveryEvent]
    ledger: OverheadLedger | None
    error: str | None = None

    @property
    def x(self):
        return None if self.solution is None else self.solution.x

    @property
    def iterations(self) -> int | None:
        return None if self.solution is None else self.solution.iterations

    @property
    def trace(self):
        return [] if self.solution is None else self.solution.trace

    @property
    def recovered(self) -> bool:
        return bool(self.recoveries) and self.status in ("converged", "max_iter")

    def to_jsonl(self) -> str:
        lines = [json.dumps(e, sort_keys=True) for e in self.events]
        tail = {"kind": "status", "status": self.status, "iteration": self.iterations,
                "rank": None, "bytes": 0, "simtime": self.events[-1]["simtime"] if self.events else 0.0}
        if self.error:
            tail["error"] = self.error
        lines.append(json.dumps(tail, sort_keys=True))
        return "\n".join(lines) + "\n"


# orchestration -------------------------------------------------------------

class Orchestrator(Hooks):
    """Persistence, fault injection and recovery around the PCG loop."""

    def __init__(self, A: CsrMatrix, b, solve: SolveConfig, cluster: ClusterConfig,
                 plan: FaultPlan | None = None, comm: SimComm | None = None):
        self.A = A
        self.b = np.asarray(b, dtype=np.float64)
        self.solve = solve
        self.cluster = cluster
        self.mode = solve.recovery_mode
        self.c = solve.c
        proc = cluster.proc
        self.plan = (plan or FaultPlan()).validate(proc, self.mode, solve.persist_period)
        self.topology = Topology.build(cluster, self.mode, self.c)
        self.partition = Partition.balanced(A.n_rows, proc)
        self.comm = comm or SimComm(A, self.partition, cost=cluster.cost)
        self.clock = self.comm.clock
        self.precond = Preconditioner.build(solve.preconditioner, A)
        self.dinv = self.partition.split(self.precond.diag_inverse)
        self._tmp = None
        sizes = [self.partition.size(s) for s in range(proc)]
        self.backend = None
        if self.mode != "none":
            directory = cluster.storage_dir
            if directory is None and self.mode in DURABLE:
                self._tmp = tempfile.TemporaryDirectory(prefix="nvmesr-")
                directory = self._tmp.name
            self.backend = make_backend(BACKEND_OF_MODE[self.mode], sizes, c=self.c,
                                        directory=directory, clock=self.clock, cost=cluster.cost,
                                        fsync=cluster.fsync)
        self.snapshot: list[SolverState | None] | None = None
        self.snapshot_j: int | None = None
        self.fired: set[int] = set()
        self.events: list[dict] = []
        self.recoveries: list[RecoveryEvent] = []
        self._persist_stats: dict | None = None
        self._persist_times: list[float] = []
        self._peak_holder_values = 0
        self.ledger = self._empty_ledger()

    # bookkeeping

    def _empty_ledger(self) -> OverheadLedger:
        led = OverheadLedger(mode=self.mode, n=self.partition.n, proc=self.partition.proc,
                             c=self.c, nnz=self.comm.plan.nnz)
        led.ram_compute_bytes = 8 * (self.comm.plan.nnz + 4 * self.partition.n)
        return led

    def _event(self, kind: str, iteration, rank=None, nbytes: int = 0, **extra) -> None:
        t = self.clock.now(rank) if rank is not None else max(
            [self.clock.now(r) for r in range(self.partition.proc)] or [0.0])
        self.events.append({"kind": kind, "iteration": iteration, "rank": rank,
                            "bytes": int(nbytes), "simtime": round(t, 9), **extra})

    def _now(self) -> float:
        return max(self.clock.now(r) for r in range(self.partition.proc))

    def _counters(self) -> dict:
        be = self.backend
        out = {"wire": be.wire_bytes, "values": be.values_written, "t": self._now()}
        if isinstance(be, PeerRamBackend):
            out["piggy"] = be.piggybacked_bytes
        if be.durable:
            out["physical"] = be.physical_written()
        return out

    def _persist_done(self, before: dict) -> None:
        after = self._counters()
        self._persist_stats = {k: after[k] - before[k] for k in after}
        self._persist_times.append(after["t"] - before["t"])
        self.ledger.persist_iterations += 1

    def _take_snapshot(self, j: int, states) -> None:
        self.snapshot = [s.copy() for s in states]
        self.snapshot_j = j
        if isinstance(self.backend, PeerRamBackend):
            self._peak_holder_values = max(self._peak_holder_values, self.backend.resident_values())
        self._event("pair_complete", j)

    # hooks

    def on_start(self, states, comm) -> None:
        self._event("start", 0)

    def matvec(self, j, states, comm):
        p = [s.p for s in states]
        if self.mode == "esr_inmem" and is_persist_iteration(j, self.solve.persist_period):
            before = self._counters()
            alive = [r for r in range(self.partition.proc) if r not in comm.dead]
            Ap, msgs = aspmv(comm, p, j, states[0].beta_prev, self.c, alive=alive)
            wire = self.backend.deliver(msgs)
            self._persist_done(before)
            self._event("redundancy", j, None, wire)
            if completes_pair(j, self.solve.persist_period):
                self._take_snapshot(j, states)
            return Ap
        return comm.matvec(p)

    def after_matvec(self, j, states) -> None:
        for k, ev in enumerate(self.plan.events):
            if k in self.fired or ev.phase != "compute" or ev.iteration != j:
                continue
            self.fired.add(k)
            self._kill(ev.ranks, j, "compute", states)
            raise RankFailure(ev.ranks, j, "compute")

    def after_step(self, states) -> None:
        j = states[0].j
        if self.mode not in DURABLE or not is_persist_iteration(j, self.solve.persist_period):
            return
        victims, crash = set(), {}
        for k, ev in enumerate(self.plan.events):
            if k not in self.fired and ev.phase == "mid_persist" and ev.iteration == j:
                self.fired.add(k)
                victims |= set(ev.ranks)
                for r in ev.ranks:
                    crash[r] = ev.cut
        before = self._counters()
        entries = {s: entry_payload(st.p, st.beta_prev) for s, st in enumerate(states)}
        torn = self.backend.persist_iteration(j, entries, crash)
        if victims:
            self._event("persist", j, None, self.backend.wire_bytes - before["wire"], torn=sorted(torn))
            self._kill(victims, j, "mid_persist", states)
            raise RankFailure(victims, j, "mid_persist")
        self._persist_done(before)
        self._event("persist", j, None, self._persist_stats["wire"])
        if completes_pair(j, self.solve.persist_period):
            self._take_snapshot(j, states)

    def _kill(self, ranks, j, phase, states) -> None:
        for r in sorted(ranks):
            self._event("fault", j, r, 0, phase=phase)
            st = states[r]
            for name in ("x", "r", "z", "p"):
                setattr(st, name, np.full_like(getattr(st, name), np.nan))
            if self.snapshot is not None:
                self.snapshot[r] = None
        self.comm.kill(ranks)
        if self.backend is not None:
            self.backend.on_failure(ranks)

    def detect_failures(self) -> frozenset:
        return frozenset(self.comm.dead)

    def recover(self, failure: RankFailure, states):
        dead = sorted(self.detect_failures())
        self._event("detect", failure.iteration, None, 0, ranks=dead)
        if self.mode == "none":
            raise UnrecoverableError(f"ranks {dead} failed and no recovery data is kept")
        if len(dead) > self.c:
            raise UnrecoverableError(f"{len(dead)} simultaneous failures exceed c={self.c}")
        nodes = self._replace(dead)
        self.comm.revive(dead)
        self.backend.on_revive(dead)

        if self.snapshot_j is None:
            self.backend.rewind(0)
            states = init_states(self.A, self.b, self.partition, self.comm, self.dinv)
            self._event("cold_restart", 0)
            self.recoveries.append(RecoveryEvent(failure.iteration, failure.phase, tuple(dead), 0,
                                                 True, {}, nodes, self._now()))
            return states

        J = self.snapshot_j
        self.backend.rewind(J)
        coordinator = dead[0]
        try:
            records = {f: self.backend.fetch(f, coordinator, iteration=J) for f in dead}
        except (ColdStartError, UnavailableError, PersistenceUnavailableError) as exc:
            raise UnrecoverableError(f"recovery records unavailable: {exc}") from exc
        for f in dead:
            self._event("fetch", J, f, 8 * (2 * len(records[f].p_curr) + 1))
        survivors = [s for s in range(self.partition.proc) if s not in dead]
        xs = {s: self.snapshot[s].x for s in survivors}
        rs = {s: self.snapshot[s].r for s in survivors}
        gathered = self.comm.gather(xs, coordinator) + self.comm.gather(rs, coordinator)
        self._event("gather", J, coordinator, gathered)
        rebuilt = reconstruct(self.A, self.precond, self.b, self.partition, dead, xs, rs, records, self.c)
        ref = self.snapshot[survivors[0]]
        new_states = []
        for s in range(self.partition.proc):
            if s in rebuilt:
                part = rebuilt[s]
                st = SolverState(J, part["x"].copy(), part["r"].copy(), part["z"].copy(), part["p"].copy(),
                                 ref.alpha, records[s].beta_prev, ref.rz)
                self.snapshot[s] = st.copy()
            else:
                st = self.snapshot[s].copy()
            new_states.append(st)
        if isinstance(self.backend, PeerRamBackend):
            lost = self.backend.rereplicate(set(dead), J)
            if lost:
                log.info("no surviving copy to re-replicate for owners %s", lost)
                self._event("degraded", J, None, 0, owners=lost)
        self._event("rollback", J, None, 0, failed_at=failure.iteration)
        self.recoveries.append(RecoveryEvent(failure.iteration, failure.phase, tuple(dead), J, False,
                                             rebuilt, nodes, self._now()))
        return new_states

    def _replace(self, dead) -> dict[int, int]:
        nodes = {}
        base = self._now()
        for r in dead:
            if self.mode == "nvm_local":
                node = self.topology.node_of[r]
                self.clock.wait_until(r, base + self.cluster.node_recovery_delay)
                self._event("revive", None, r, 0, node=node)
            else:
                self.topology.lose(r)
                node = self.topology.spawn(r)
                self.clock.wait_until(r, base + self.cluster.cost.latency)
                self._event("spawn", None, r, 0, node=node)
            nodes[r] = node
        return nodes

    # measured ledger

    def finalize(self) -> OverheadLedger:
        led = self.ledger
        if self.mode == "none":
            return led
        n = self.partition.n
        if self.snapshot is not None:
            led.ram_rollback_bytes = sum(s.nbytes for s in self.snapshot if s is not None)
        stats = self._persist_stats or {}
        if isinstance(self.backend, PeerRamBackend):
            peak = max(self._peak_holder_values, self.backend.resident_values())
            led.ram_redundancy_bytes = 8 * peak
            led.ram_redundancy_values = peak + (2 * n if self.snapshot_j is not None else 0)
            if "piggy" in stats:
                led.wire_piggybacked_bytes_per_persist = stats["piggy"]
        if self.backend.durable:
            led.nvm_resident_bytes_physical = sum(
                Path(p).stat().st_size for pair in self.backend.windows.values()
                for w in pair for p in w.backing.paths)
            if self.snapshot_j is not None:
                J = self.snapshot_j
                vals = 0
                for owner in range(self.partition.proc):
                    held = {f.iteration: len(f.payload) // 8 - 1
                            for w in self.backend.windows[owner] for f in w.backing.scan()
                            if f is not None and f.iteration in (J - 1, J)}
                    vals += sum(held.values())
                led.nvm_resident_values = vals
                led.nvm_resident_bytes = 8 * vals
            if stats:
                led.nvm_written_values_per_persist = stats["values"]
                led.nvm_written_bytes_per_persist = 8 * stats["values"]
                led.nvm_written_bytes_physical_per_persist = stats["physical"]
        if stats:
            led.wire_bytes_per_persist = stats["wire"]
        if self._persist_times:
            led.persist_simtime = sum(self._persist_times) / len(self._persist_times)
        return led

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


def simulate(A: CsrMatrix, b, solve: SolveConfig, cluster: ClusterConfig | None = None,
             plan: FaultPlan | str | None = None, *, record_states: bool = False) -> RunReport:
    """Run the solver on the simulated cluster with the given fault plan.

    Raises InvalidConfigError for inconsistent configurations and
    CapacityError when the configured memory cannot hold the run.  Failures
    beyond what the configuration tolerates give ``status="unrecoverable"``.
    """
    cluster = cluster or ClusterConfig(proc=1)
    solve.validate(cluster.proc)
    cluster.validate(solve.recovery_mode, solve.c)
    if not isinstance(plan, FaultPlan):
        plan = FaultPlan.parse(plan)
    predicted = account(A.n_rows, cluster.proc, solve.c, solve.recovery_mode, nnz=A.nnz)
    predicted.check_capacity(cluster.M_V, cluster.M_NV)

    comm = SimComm(A, Partition.balanced(A.n_rows, cluster.proc), cost=cluster.cost)
    orch = Orchestrator(A, b, solve, cluster, plan, comm)
    try:
        try:
            sol = run(solve, A, b, proc=cluster.proc, hooks=orch, comm=comm, record_states=record_states)
        except UnrecoverableError as exc:
            orch._event("unrecoverable", None)
            return RunReport("unrecoverable", None, orch.events, orch.recoveries, orch.finalize(), str(exc))
        orch._event("finish", sol.iterations, None, 0, status=sol.status)
        ledger = orch.finalize()
        sol.ledger = ledger
        ledger.check_capacity(cluster.M_V, cluster.M_NV)
        return RunReport(sol.status, sol, orch.events, orch.recoveries, ledger)
    finally:
        orch.close()
