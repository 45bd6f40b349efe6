"""Redundancy creation and exact state reconstruction for PCG.

The state of a rank at iteration j is (x, r, z, p).  Given two successive
p-slices of a lost block and the scalar beta linking them, the block can be
rebuilt from the survivors' x and r:

    z_f = p_f(j) - beta(j-1) * p_f(j-1)
    r_f solves  P_ff r_f = z_f - P_fs r_s
    x_f solves  A_ff x_f = b_f - r_f - A_fs x_s
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ColdStartError,
    CorruptRecordError,
    PlacementError,
    StaleRecordError,
    UnrecoverableError,
)
from .linalg import CsrMatrix, Partition, Preconditioner, cholesky_solve, spmv, submatrix
from .rma import decode_frame, encode_frame


@dataclass(frozen=True, eq=False)
class RecoveryRecord:
    owner: int
    j: int
    p_prev: np.ndarray
    p_curr: np.ndarray
    beta_prev: float
    checksum: int

    @classmethod
    def build(cls, owner: int, j: int, p_prev, p_curr, beta_prev: float) -> "RecoveryRecord":
        p_prev = np.array(p_prev, dtype=np.float64)
        p_curr = np.array(p_curr, dtype=np.float64)
        if p_prev.shape != p_curr.shape or p_prev.ndim != 1:
            raise ValueError("p_prev and p_curr must be equal-length vectors")
        frame = encode_frame(j, owner, 0, _record_payload(p_prev, p_curr, beta_prev))
        checksum = struct.unpack_from("<Q", frame, 34)[0]
        return cls(owner, j, p_prev, p_curr, float(beta_prev), checksum)

    def to_bytes(self) -> bytes:
        payload = _record_payload(self.p_prev, self.p_curr, self.beta_prev)
        frame = bytearray(encode_frame(self.j, self.owner, 0, payload))
        # keep the stored checksum so a tampered record still fails validation
        struct.pack_into("<Q", frame, 34, self.checksum)
        return bytes(frame)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "RecoveryRecord":
        frame = decode_frame(buf)
        m, rem = divmod(len(frame.payload) - 8, 16)
        if rem or m < 0:
            raise CorruptRecordError("payload length is not a record layout")
        values = np.frombuffer(frame.payload, dtype="<f8").astype(np.float64)
        return cls(frame.owner, frame.iteration, values[1:1 + m].copy(),
                   values[1 + m:].copy(), float(values[0]), frame.checksum)

    def verify(self) -> None:
        decode_frame(self.to_bytes())

    def same_as(self, other: "RecoveryRecord") -> bool:
        return self.to_bytes() == other.to_bytes()


def _record_payload(p_prev, p_curr, beta) -> bytes:
    return np.concatenate([[beta], p_prev, p_curr]).astype("<f8").tobytes()


def entry_payload(p, beta_prev: float) -> bytes:
    """One persisted iteration: beta(j-1) followed by p(j)."""
    return np.concatenate([[beta_prev], np.asarray(p, dtype=np.float64)]).astype("<f8").tobytes()


def decode_entry(payload: bytes) -> tuple[float, np.ndarray]:
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return float(values[0]), values[1:].copy()


def holders_for(owner: int, proc: int, c: int) -> list[int]:
    """Ranks keeping redundant copies of ``owner``'s slice.

    Together with the owner's own slice this gives c+1 copies, so any c
    simultaneous failures leave one.
    """
    if not 0 <= c < proc:
        raise PlacementError(f"c={c} needs 0 <= c < proc={proc}")
    return [(owner + k) % proc for k in range(1, c + 1)]


def placement(proc: int, c: int) -> dict[int, list[int]]:
    return {s: holders_for(s, proc, c) for s in range(proc)}


@dataclass(frozen=True, eq=False)
class RedundancyMessage:
    owner: int
    holder: int
    j: int
    beta_prev: float
    p: np.ndarray
    piggybacked: int  # entries the holder already got through the halo exchange

    @property
    def nbytes(self) -> int:
        return 8 * (len(self.p) + 1)

    @property
    def extra_wire_bytes(self) -> int:
        return 8 * (len(self.p) - self.piggybacked + 1)


@dataclass
class RedundancyStore:
    """Per-holder copies of other ranks' p-slices.

    After every completed pair only those two iterations are kept.  The first
    iteration of a new pair is held alongside until its partner arrives.
    """

    proc: int
    held: dict = field(default_factory=dict)  # holder -> owner -> {j: (beta, p)}

    def receive(self, msg: RedundancyMessage) -> None:
        entries = self.held.setdefault(msg.holder, {}).setdefault(msg.owner, {})
        entries[msg.j] = (msg.beta_prev, msg.p.copy())
        if msg.j - 1 in entries:
            keep = {msg.j - 1, msg.j}
        else:
            keep = {msg.j}
            done = _newest_pair(entries, below=msg.j)
            if done is not None:
                keep |= {done - 1, done}
        for k in list(entries):
            if k not in keep:
                del entries[k]

    def pair(self, holder: int, owner: int, iteration: int | None = None):
        entries = self.held.get(holder, {}).get(owner, {})
        J = _newest_pair(entries) if iteration is None else iteration
        if J is None or J not in entries or J - 1 not in entries:
            return None
        return J, entries[J - 1], entries[J]

    def drop_holder(self, holder: int) -> None:
        self.held.pop(holder, None)

    def rewind(self, iteration: int) -> None:
        for owners in self.held.values():
            for entries in owners.values():
                for k in [k for k in entries if k > iteration]:
                    del entries[k]

    def iterations(self, holder: int, owner: int) -> list[int]:
        return sorted(self.held.get(holder, {}).get(owner, {}))

    def values_resident(self, pairs_only: bool = False) -> int:
        total = 0
        for owners in self.held.values():
            for entries in owners.values():
                if pairs_only:
                    J = _newest_pair(entries)
                    ks = [] if J is None else [J - 1, J]
                else:
                    ks = list(entries)
                total += sum(len(entries[k][1]) for k in ks)
        return total


def _newest_pair(entries: dict, below: int | None = None) -> int | None:
    for k in sorted(entries, reverse=True):
        if below is not None and k >= below:
            continue
        if k - 1 in entries:
            return k
    return None


def aspmv(comm, p_slices, j: int, beta_prev: float, c: int, alive=None):
    """Augmented SpMV: the ordinary product plus redundancy messages.

    Arithmetic is exactly that of ``comm.matvec``.  Every owner's full slice
    goes to each of its holders; the part a holder already receives for its
    own rows is marked as piggybacked on the halo traffic.
    """
    proc = len(p_slices)
    where = placement(proc, c)
    if alive is not None:
        dead = {h for hs in where.values() for h in hs} - set(alive)
        if dead:
            raise PlacementError(f"placement names dead ranks {sorted(dead)}")
    Ap = comm.matvec(p_slices)
    messages = []
    for owner in range(proc):
        for holder in where[owner]:
            shared = comm.plan.halo_count(src=owner, dst=holder)
            messages.append(RedundancyMessage(owner, holder, j, float(beta_prev),
                                              np.array(p_slices[owner]), shared))
    return Ap, messages


def reconstruct(A: CsrMatrix, precond: Preconditioner, b, partition: Partition,
                failed, x_survivors: dict, r_survivors: dict, records: dict,
                c: int | None = None) -> dict[int, dict[str, np.ndarray]]:
    """Rebuild x, r, p, z of the failed ranks at the records' iteration.

    ``x_survivors`` and ``r_survivors`` map each surviving rank to its slice;
    ``records`` maps each failed rank to its RecoveryRecord.
    """
    failed = sorted(set(failed))
    if c is not None and len(failed) > c:
        raise UnrecoverableError(f"{len(failed)} failed ranks exceed tolerance c={c}")
    missing = [f for f in failed if f not in records]
    if missing:
        raise ColdStartError(f"no recovery record for ranks {missing}")
    for f in failed:
        records[f].verify()
    iters = {records[f].j for f in failed}
    if len(iters) != 1:
        raise StaleRecordError(f"records disagree on the iteration: {sorted(iters)}")
    survivors = [s for s in range(partition.proc) if s not in failed]
    if sorted(x_survivors) != survivors or sorted(r_survivors) != survivors:
        raise ValueError("need x and r slices from exactly the surviving ranks")

    b = np.asarray(b, dtype=np.float64)
    idx_f = partition.indices(failed)
    idx_s = partition.indices(survivors)
    x_s = np.concatenate([x_survivors[s] for s in survivors]) if survivors else np.zeros(0)

    p_f = np.concatenate([records[f].p_curr for f in failed])
    z_f = np.concatenate([records[f].p_curr - records[f].beta_prev * records[f].p_prev
                          for f in failed])
    # P is diagonal, so the coupling P_fs r_s vanishes and v = z_f
    r_f = precond.solve_block(z_f, idx_f)

    coupling = np.concatenate([spmv(submatrix(A, partition.block(f), idx_s), x_s)
                               for f in failed])
    w = b[idx_f] - r_f - coupling
    A_ff = np.vstack([submatrix(A, partition.block(f), idx_f).to_dense() for f in failed])
    x_f = cholesky_solve(A_ff, w)

    out = {}
    pos = 0
    for f in failed:
        m = partition.size(f)
        sl = slice(pos, pos + m)
        out[f] = {"x": x_f[sl].copy(), "r": r_f[sl].copy(), "p": p_f[sl].copy(), "z": z_f[sl].copy()}
        pos += m
    return out
