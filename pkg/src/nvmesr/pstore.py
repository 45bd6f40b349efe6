"""Persistence backends for recovery data.

Three places can hold the p-slices needed for reconstruction:

* ``peer_ram``   copies in other ranks' memory (in-memory ESR),
* ``local_slot`` the owner's own durable memory, unreachable while it is down,
* ``prd_window`` a dedicated persistent-recovery-data rank reached through
  PSCW epochs, reachable by every live rank.

Every persistence iteration j stores one *entry* per owner: beta(j-1)
followed by the slice of p(j).  A RecoveryRecord for iteration J is the pair
of entries J-1 and J.  The durable backends keep two windows per owner,
selected by the parity of j, and each window is a double-buffered slot pair,
so a torn write of entry j never destroys entries j-1 or j-2.
"""

from __future__ import annotations

import math
import warnings
from pathlib import Path

import numpy as np

from .errors import (
    ColdStartError,
    PersistenceUnavailableError,
    RedundancyWarning,
    SimulatedCrash,
    UnavailableError,
)
from .esr import (
    RecoveryRecord,
    RedundancyMessage,
    RedundancyStore,
    decode_entry,
    entry_payload,
    holders_for,
)
from .rma import HEADER_SIZE, CostModel, DurableSlotPair, EpochGroup, SimClock, Window

KINDS = ("peer_ram", "local_slot", "prd_window")


class Backend:
    kind = ""
    durable = False

    def __init__(self, sizes: list[int], clock: SimClock | None = None, cost: CostModel | None = None):
        self.sizes = list(sizes)
        self.proc = len(self.sizes)
        self.clock = clock or SimClock()
        self.cost = cost or CostModel()
        self.dead: set[int] = set()
        self.wire_bytes = 0
        self.values_written = 0

    def persist(self, owner: int, record: RecoveryRecord) -> None:
        """Store a whole record: its two entries, in iteration order."""
        raise NotImplementedError

    def fetch(self, owner: int, requester: int, iteration: int | None = None) -> RecoveryRecord:
        raise NotImplementedError

    def rewind(self, iteration: int) -> None:
        raise NotImplementedError

    def on_failure(self, ranks) -> None:
        self.dead |= set(ranks)

    def on_revive(self, ranks) -> None:
        self.dead -= set(ranks)


# durable backends -----------------------------------------------------------

class _DurableBackend(Backend):
    durable = True

    def __init__(self, sizes, directory, clock=None, cost=None, fsync: bool = False):
        super().__init__(sizes, clock, cost)
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.windows = {
            owner: [self._make_window(owner, parity) for parity in (0, 1)]
            for owner in range(self.proc)
        }

    def _target(self, owner: int) -> int:
        raise NotImplementedError

    def _make_window(self, owner: int, parity: int) -> Window:
        size = 8 * (self.sizes[owner] + 1)
        backing = DurableSlotPair(self.directory, f"{self.kind}_r{owner}_w{parity}", size, owner, self.fsync)
        return Window(self._target(owner), size, backing, self.clock, self.cost)

    def window(self, owner: int, iteration: int) -> Window:
        return self.windows[owner][iteration % 2]

    # writes

    def persist_iteration(self, j: int, entries: dict[int, bytes],
                          crash: dict[int, int] | None = None) -> set[int]:
        """Persist entry j of every owner; return the owners that crashed mid-write."""
        crash = crash or {}
        crashed = set()
        for owner in sorted(entries):
            if not self._write(owner, j, entries[owner], crash.get(owner)):
                crashed.add(owner)
        return crashed

    def persist(self, owner: int, record: RecoveryRecord) -> None:
        self._write(owner, record.j - 1, entry_payload(record.p_prev, math.nan), None)
        self._write(owner, record.j, entry_payload(record.p_curr, record.beta_prev), None)

    def _write(self, owner: int, j: int, payload: bytes, cut: int | None) -> bool:
        raise NotImplementedError

    # reads

    def _available(self, owner: int, requester: int) -> None:
        raise NotImplementedError

    def _read_entry(self, owner: int, requester: int, j: int):
        w = self.window(owner, j)
        frames = w.backing.scan()
        hits = [(f.generation, k) for k, f in enumerate(frames) if f is not None and f.iteration == j]
        if not hits:
            return None
        slot = max(hits)[1]
        w.win_post(EpochGroup([requester]), iteration=j)
        w.win_start(requester)
        data = w.get_pmem(requester, 0, w.size, slot=slot)
        w.win_complete(requester)
        w.win_wait()
        return decode_entry(data)

    def newest_pair(self, owner: int) -> int | None:
        found = set()
        for w in self.windows[owner]:
            found |= {f.iteration for f in w.backing.scan() if f is not None}
        pairs = [j for j in found if j - 1 in found]
        return max(pairs) if pairs else None

    def fetch(self, owner: int, requester: int, iteration: int | None = None) -> RecoveryRecord:
        self._available(owner, requester)
        J = self.newest_pair(owner) if iteration is None else iteration
        if J is None:
            raise ColdStartError(f"no complete record for rank {owner}")
        prev = self._read_entry(owner, requester, J - 1)
        curr = self._read_entry(owner, requester, J)
        if prev is None or curr is None:
            raise ColdStartError(f"no valid entries {J - 1}, {J} for rank {owner}")
        return RecoveryRecord.build(owner, J, prev[1], curr[1], curr[0])

    def rewind(self, iteration: int) -> None:
        for pair in self.windows.values():
            for w in pair:
                w.backing.rewind(iteration)

    # accounting

    def resident_bytes(self) -> int:
        """Physical durable footprint: every slot of every window."""
        return sum(w.backing.slot_bytes * 2 for pair in self.windows.values() for w in pair)

    def physical_written(self) -> int:
        return sum(w.backing.bytes_written for pair in self.windows.values() for w in pair)


class LocalSlotBackend(_DurableBackend):
    """Each owner persists into its own node's durable memory."""

    kind = "local_slot"

    def _target(self, owner: int) -> int:
        return owner

    def _write(self, owner, j, payload, cut) -> bool:
        w = self.window(owner, j)
        w.win_post(EpochGroup([owner]), iteration=j)
        w.win_start(owner)
        w.put_pmem(owner, 0, payload)
        w.win_complete(owner)
        try:
            w.win_wait_persist(crash_at=cut)
        except SimulatedCrash:
            return False
        self.values_written += len(payload) // 8 - 1
        return True

    def _available(self, owner, requester) -> None:
        if owner in self.dead:
            raise UnavailableError(f"rank {owner}'s durable memory is unreachable until it recovers")
        if requester in self.dead:
            raise UnavailableError(f"requester {requester} is down")

    def on_revive(self, ranks) -> None:
        super().on_revive(ranks)
        for r in ranks:
            for w in self.windows[r]:
                w.reopen()


class PrdWindowBackend(_DurableBackend):
    """All owners persist to one PRD rank, numbered ``proc``."""

    kind = "prd_window"

    def __init__(self, sizes, directory, clock=None, cost=None, fsync: bool = False):
        self.prd = len(sizes)
        self.prd_alive = True
        super().__init__(sizes, directory, clock, cost, fsync)

    def _target(self, owner: int) -> int:
        return self.prd

    def _write(self, owner, j, payload, cut) -> bool:
        if not self.prd_alive:
            raise PersistenceUnavailableError("the PRD node is down")
        w = self.window(owner, j)
        w.win_post(EpochGroup([owner]), iteration=j)
        w.win_wait_persist()  # target blocks until the origin completes
        w.win_start(owner)
        if cut is not None and cut < HEADER_SIZE + len(payload):
            # the origin dies before completing, after shipping at most ``cut``
            # bytes; the PRD drops the epoch and commits nothing
            sent = min(cut, len(payload))
            if sent > 0:
                w.put_pmem(owner, 0, payload[:sent])
            self.wire_bytes += sent
            w.abort()
            return False
        w.put_pmem(owner, 0, payload)
        self.wire_bytes += len(payload)
        w.win_complete(owner)
        self.values_written += len(payload) // 8 - 1
        return True

    def _available(self, owner, requester) -> None:
        if not self.prd_alive:
            raise PersistenceUnavailableError("the PRD node is down")
        if requester in self.dead:
            raise UnavailableError(f"requester {requester} is down")

    def on_failure(self, ranks) -> None:
        super().on_failure(ranks)
        for r in ranks:
            for w in self.windows[r]:
                if w.epoch_state != "idle":
                    w.abort()


# peer RAM ------------------------------------------------------------------

class PeerRamBackend(Backend):
    """Copies of every owner's slice in the RAM of its c holders."""

    kind = "peer_ram"

    def __init__(self, sizes, c: int, clock=None, cost=None):
        super().__init__(sizes, clock, cost)
        self.c = c
        self.holders = {s: holders_for(s, self.proc, c) for s in range(self.proc)}
        self.store = RedundancyStore(self.proc)
        self.piggybacked_bytes = 0

    def deliver(self, messages: list[RedundancyMessage]) -> int:
        """Hand ASpMV messages to their holders; return the bytes put on the wire."""
        wire = 0
        for msg in messages:
            if msg.holder in self.dead:
                continue
            self.store.receive(msg)
            wire += msg.nbytes
            self.piggybacked_bytes += 8 * msg.piggybacked
            self.values_written += len(msg.p)
            self.clock.advance(msg.holder, self.cost.transfer(msg.nbytes))
        self.wire_bytes += wire
        return wire

    def persist(self, owner: int, record: RecoveryRecord) -> None:
        live = [h for h in self.holders[owner] if h not in self.dead]
        if self.holders[owner] and not live:
            raise PersistenceUnavailableError(f"every holder of rank {owner} is down")
        if len(live) < len(self.holders[owner]):
            warnings.warn(f"rank {owner} has {len(live)} of {self.c} holders alive", RedundancyWarning,
                          stacklevel=2)
        msgs = [RedundancyMessage(owner, h, j, beta, np.array(p), 0)
                for j, beta, p in ((record.j - 1, math.nan, record.p_prev),
                                   (record.j, record.beta_prev, record.p_curr))
                for h in live]
        self.deliver(msgs)

    def fetch(self, owner: int, requester: int, iteration: int | None = None) -> RecoveryRecord:
        live = [h for h in self.holders[owner] if h not in self.dead]
        if self.holders[owner] and not live:
            raise UnavailableError(f"no live holder for rank {owner}")
        for h in live:
            found = self.store.pair(h, owner, iteration)
            if found is not None:
                J, (_, p_prev), (beta, p_curr) = found
                self.clock.advance(requester, self.cost.transfer(8 * (2 * len(p_curr) + 1)))
                return RecoveryRecord.build(owner, J, p_prev, p_curr, beta)
        raise ColdStartError(f"no complete copy of rank {owner}'s slices")

    def rewind(self, iteration: int) -> None:
        self.store.rewind(iteration)

    def on_failure(self, ranks) -> None:
        super().on_failure(ranks)
        for r in ranks:
            self.store.drop_holder(r)

    def rereplicate(self, ranks, iteration: int) -> list[int]:
        """Refill revived holders from surviving ones; return owners left without a copy."""
        missing = []
        for owner in range(self.proc):
            for h in self.holders[owner]:
                if h not in ranks:
                    continue
                src = next((s for s in self.holders[owner]
                            if s not in ranks and s not in self.dead
                            and self.store.pair(s, owner, iteration) is not None), None)
                if src is None:
                    missing.append(owner)
                    continue
                _, prev, curr = self.store.pair(src, owner, iteration)
                entries = self.store.held.setdefault(h, {}).setdefault(owner, {})
                entries.clear()
                entries[iteration - 1] = (prev[0], prev[1].copy())
                entries[iteration] = (curr[0], curr[1].copy())
        return sorted(set(missing))

    def resident_values(self) -> int:
        return self.store.values_resident(pairs_only=True)


def make_backend(kind: str, sizes, *, c: int = 0, directory=None, clock=None, cost=None,
                 fsync: bool = False) -> Backend:
    if kind == "peer_ram":
        return PeerRamBackend(sizes, c, clock, cost)
    if directory is None:
        raise ValueError(f"{kind} needs a storage directory")
    if kind == "local_slot":
        return LocalSlotBackend(sizes, directory, clock, cost, fsync)
    if kind == "prd_window":
        return PrdWindowBackend(sizes, directory, clock, cost, fsync)
    raise ValueError(f"unknown backend {kind!r}")


def persist(backend: Backend, owner: int, record: RecoveryRecord) -> None:
    record.verify()
    backend.persist(owner, record)


def fetch(backend: Backend, owner: int, requester: int, iteration: int | None = None) -> RecoveryRecord:
    return backend.fetch(owner, requester, iteration)


def frame_bytes(slice_len: int) -> int:
    """Physical size of one persisted entry, header included."""
    return HEADER_SIZE + 8 * (slice_len + 1)
