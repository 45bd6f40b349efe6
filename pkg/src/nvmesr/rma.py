"""Simulated one-sided communication windows with persist-on-close epochs.

A durable window is backed by two slot files written alternately.  Puts land
in a volatile staging copy of the inactive slot; closing the exposure epoch
writes the payload, flushes, then writes the header (which carries the
checksum) and flushes again.  Only then does the active slot flip.  A crash
anywhere in that sequence leaves the previously active slot untouched.

Slot file layout, little endian::

    magic "ESRW" | version u16 | iteration u64 | owner u32 |
    payload length u64 | generation u64 | checksum u64 | payload

The checksum is 64-bit FNV-1a over the header without its checksum field,
followed by the payload.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import (
    CollectiveMismatchError,
    CorruptRecordError,
    EpochError,
    RangeError,
    SimulatedCrash,
    UnsupportedError,
)

log = logging.getLogger(__name__)

MAGIC = b"ESRW"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHQIQQQ")
HEADER_SIZE = HEADER.size  # 42
_UNSUMMED = struct.Struct("<4sHQIQQ")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(*chunks: bytes) -> int:
    h = FNV_OFFSET
    for chunk in chunks:
        for b in chunk:
            h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


@dataclass(frozen=True)
class Frame:
    iteration: int
    owner: int
    generation: int
    payload: bytes
    checksum: int


def encode_frame(iteration: int, owner: int, generation: int, payload: bytes) -> bytes:
    head = _UNSUMMED.pack(MAGIC, FORMAT_VERSION, iteration, owner, len(payload), generation)
    checksum = fnv1a64(head, payload)
    return head + struct.pack("<Q", checksum) + bytes(payload)


def decode_frame(buf: bytes) -> Frame:
    """Parse and verify one frame; raise CorruptRecordError on any mismatch."""
    if len(buf) < HEADER_SIZE:
        raise CorruptRecordError("truncated header")
    magic, version, iteration, owner, length, generation, checksum = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptRecordError("bad magic")
    if version != FORMAT_VERSION:
        raise CorruptRecordError(f"unsupported format version {version}")
    if len(buf) < HEADER_SIZE + length:
        raise CorruptRecordError("truncated payload")
    payload = bytes(buf[HEADER_SIZE:HEADER_SIZE + length])
    if fnv1a64(bytes(buf[:HEADER_SIZE - 8]), payload) != checksum:
        raise CorruptRecordError("checksum mismatch")
    return Frame(iteration, owner, generation, payload, checksum)


@dataclass(frozen=True)
class CostModel:
    """Simulated-time constants.  Units are arbitrary and not calibrated to hardware."""

    latency: float = 1.0
    byte_cost: float = 1e-3
    persist_byte_cost: float = 4e-3
    flush_cost: float = 2.0

    def transfer(self, nbytes: int) -> float:
        return self.latency + nbytes * self.byte_cost

    def persist(self, nbytes: int) -> float:
        return nbytes * self.persist_byte_cost + 2 * self.flush_cost


class SimClock:
    """Per-rank simulated time."""

    def __init__(self):
        self._t: dict[int, float] = {}

    def now(self, rank: int) -> float:
        return self._t.get(rank, 0.0)

    def advance(self, rank: int, dt: float) -> float:
        self._t[rank] = self.now(rank) + dt
        return self._t[rank]

    def wait_until(self, rank: int, t: float) -> float:
        self._t[rank] = max(self.now(rank), t)
        return self._t[rank]

    def snapshot(self) -> dict[int, float]:
        return dict(self._t)


class DurableSlotPair:
    """Two alternately written slot files holding frames of a fixed payload size."""

    def __init__(self, directory, name: str, payload_size: int, owner: int, fsync: bool = False):
        self.directory = Path(directory)
        self.name = name
        self.payload_size = int(payload_size)
        self.owner = int(owner)
        self.fsync = fsync
        self.paths = [self.directory / f"{name}.slot{k}" for k in (0, 1)]
        self.bytes_written = 0
        self.commits = 0
        for path in self.paths:
            if not path.exists():
                path.write_bytes(bytes(HEADER_SIZE + self.payload_size))
        self.recover()

    @property
    def slot_bytes(self) -> int:
        return HEADER_SIZE + self.payload_size

    def read_slot(self, k: int) -> Frame | None:
        try:
            return decode_frame(self.paths[k].read_bytes())
        except CorruptRecordError:
            return None

    def scan(self) -> list[Frame | None]:
        return [self.read_slot(0), self.read_slot(1)]

    def recover(self) -> None:
        """Re-derive the active slot from durable content alone."""
        frames = self.scan()
        valid = [(f.generation, k) for k, f in enumerate(frames) if f is not None]
        self.active_slot = max(valid)[1] if valid else 0
        self._next_generation = max((g for g, _ in valid), default=0) + 1

    def rewind(self, max_iteration: int) -> None:
        """Make the newest slot at or below ``max_iteration`` active so that the
        next commit overwrites anything newer."""
        frames = self.scan()
        keep = [(f.generation, k) for k, f in enumerate(frames)
                if f is not None and f.iteration <= max_iteration]
        if keep:
            self.active_slot = max(keep)[1]
        else:
            stale = [(f.generation, k) for k, f in enumerate(frames) if f is not None]
            # both slots hold newer data (or nothing); make the older one inactive
            self.active_slot = max(stale)[1] if stale else 0

    def active_frame(self) -> Frame | None:
        return self.read_slot(self.active_slot)

    def read_active(self) -> bytes:
        frame = self.active_frame()
        return frame.payload if frame is not None else bytes(self.payload_size)

    def write_sequence(self, payload: bytes, iteration: int) -> tuple[int, bytes]:
        """Target slot and the exact bytes a commit would write, payload first."""
        frame = encode_frame(iteration, self.owner, self._next_generation, payload)
        return 1 - self.active_slot, frame

    def commit(self, payload: bytes, iteration: int, crash_at: int | None = None) -> int:
        payload = bytes(payload)
        if len(payload) != self.payload_size:
            raise RangeError(f"payload of {len(payload)} bytes, slot holds {self.payload_size}")
        slot, frame = self.write_sequence(payload, iteration)
        header, body = frame[:HEADER_SIZE], frame[HEADER_SIZE:]
        total = len(body) + len(header)
        budget = total if crash_at is None else max(0, min(int(crash_at), total))
        with open(self.paths[slot], "r+b") as fh:
            n_body = min(budget, len(body))
            fh.seek(HEADER_SIZE)
            fh.write(body[:n_body])
            self._barrier(fh)
            n_head = budget - n_body
            if n_head:
                fh.seek(0)
                fh.write(header[:n_head])
                self._barrier(fh)
        self.bytes_written += budget
        if budget < total:
            raise SimulatedCrash(budget, total)
        self.active_slot = slot
        self._next_generation += 1
        self.commits += 1
        return total

    def _barrier(self, fh) -> None:
        fh.flush()
        if self.fsync:
            os.fsync(fh.fileno())


class VolatileSlot:
    """RAM-backed window memory; lost when the target dies."""

    def __init__(self, payload_size: int):
        self.payload_size = int(payload_size)
        self.data = bytearray(self.payload_size)
        self.active_slot = 0

    def read_active(self) -> bytes:
        return bytes(self.data)

    def commit(self, payload: bytes, iteration: int, crash_at: int | None = None) -> int:
        self.data[:] = payload
        return 0


@dataclass
class EpochGroup:
    members: frozenset

    def __init__(self, members: Iterable[int]):
        self.members = frozenset(int(m) for m in members)
        if not self.members:
            raise EpochError("epoch group must not be empty")


@dataclass
class _Access:
    state: str = "started"  # started | completed
    complete_time: float = 0.0
    puts: int = 0


@dataclass
class Window:
    """One window at ``target``; origins reach it through PSCW or fence epochs."""

    target: int
    size: int
    backing: object
    clock: SimClock = field(default_factory=SimClock)
    cost: CostModel = field(default_factory=CostModel)
    world: frozenset | None = None
    fence_timeout: float = 1000.0

    def __post_init__(self):
        self.epoch_state = "idle"  # idle | exposed | waiting | fence
        self.group: frozenset = frozenset()
        self.access: dict[int, _Access] = {}
        self.staging: bytearray | None = None
        self.epoch_iteration = 0
        self.epochs_closed = 0
        self.bytes_put = 0
        self.bytes_committed = 0
        self.bytes_got = 0
        self.last_commit_time = 0.0
        self.post_time = 0.0
        self._wait_crash: int | None = None
        self._persist = True
        self._fence_arrivals: dict[int, float] = {}
        self._fence_open = False

    @property
    def durable(self) -> bool:
        return isinstance(self.backing, DurableSlotPair)

    @property
    def active_slot(self) -> int:
        return self.backing.active_slot

    # target side -------------------------------------------------------

    def win_post(self, group: EpochGroup, iteration: int = 0) -> None:
        if self.epoch_state != "idle":
            raise EpochError(f"post while window at rank {self.target} is {self.epoch_state}")
        if self.world is not None and not group.members <= self.world:
            raise EpochError(f"group {sorted(group.members)} names unknown ranks")
        self.epoch_state = "exposed"
        self.group = group.members
        self.access = {}
        self.staging = bytearray(self.backing.read_active())
        self.epoch_iteration = iteration
        self.post_time = self.clock.now(self.target)

    def win_wait_persist(self, crash_at: int | None = None) -> bool:
        """Close the exposure epoch and make its puts durable.

        Returns True once the commit has happened; False means the target is
        blocked until the last origin completes, and the commit then runs
        inside that origin's ``win_complete``.
        """
        return self._close(persist=True, crash_at=crash_at)

    def win_wait(self) -> bool:
        """Close the exposure epoch without persisting (read-only epochs).
        Puts made in it are discarded on a durable window."""
        return self._close(persist=False, crash_at=None)

    def _close(self, persist: bool, crash_at: int | None) -> bool:
        if self.epoch_state != "exposed":
            raise EpochError(f"wait on window at rank {self.target} while {self.epoch_state}")
        self.epoch_state = "waiting"
        self._wait_crash = crash_at
        self._persist = persist
        if all(self._completed(m) for m in self.group):
            self._commit()
            return True
        return False

    def abort(self) -> None:
        """Drop an epoch whose origin died before completing; nothing becomes durable."""
        self.epoch_state = "idle"
        self.staging = None
        self.access = {}
        self.group = frozenset()

    # origin side -------------------------------------------------------

    def win_start(self, origin: int, group: EpochGroup | None = None) -> None:
        if self.epoch_state not in ("exposed", "waiting") or origin not in self.group:
            raise EpochError(f"rank {origin} has no matching exposure epoch at rank {self.target}")
        if group is not None and self.target not in group.members:
            raise EpochError("access group does not contain the target")
        if origin in self.access:
            raise EpochError(f"rank {origin} already started an access epoch")
        self.clock.wait_until(origin, self.post_time)
        self.access[origin] = _Access()

    def put_pmem(self, origin: int, offset: int, data: bytes) -> None:
        self._require_access(origin)
        data = bytes(data)
        if offset < 0 or offset + len(data) > self.size:
            raise RangeError(f"put [{offset}, {offset + len(data)}) outside window of {self.size}")
        self.staging[offset:offset + len(data)] = data
        self.access[origin].puts += 1
        self.bytes_put += len(data)
        self.clock.advance(origin, self.cost.transfer(len(data)))

    def get_pmem(self, origin: int, offset: int, length: int, slot: int | None = None) -> bytes:
        """Read durable window content; ``slot`` picks a specific slot of a
        durable window instead of the active one."""
        self._require_access(origin)
        if offset < 0 or length < 0 or offset + length > self.size:
            raise RangeError(f"get [{offset}, {offset + length}) outside window of {self.size}")
        self.clock.advance(origin, self.cost.transfer(length))
        if slot is None or not self.durable:
            data = self.backing.read_active()
        else:
            frame = self.backing.read_slot(slot)
            data = frame.payload if frame is not None else bytes(self.size)
        self.bytes_got += length
        return data[offset:offset + length]

    def win_complete(self, origin: int) -> float:
        """Hand the origin's transfers to the target and return immediately."""
        self._require_access(origin)
        acc = self.access[origin]
        acc.state = "completed"
        acc.complete_time = self.clock.advance(origin, self.cost.latency)
        if self.epoch_state == "waiting" and all(self._completed(m) for m in self.group):
            self._commit()
        return acc.complete_time

    # collective fence -------------------------------------------------

    def win_fence_persist(self, rank: int, members: Iterable[int] | None = None) -> bool:
        """Collective fence; the call that completes the collective commits.

        The first fence opens a combined access/exposure epoch for every member;
        each later fence commits what was put since and opens the next one.
        """
        if self.epoch_state not in ("idle", "fence"):
            raise EpochError("fence while a PSCW epoch is active")
        if members is not None:
            if self._fence_arrivals and frozenset(members) != self.group:
                raise CollectiveMismatchError("fence called with a different member set")
            self.group = frozenset(members)
        elif not self.group:
            raise CollectiveMismatchError("fence members unknown")
        if rank not in self.group:
            raise CollectiveMismatchError(f"rank {rank} is not a fence member")
        if rank in self._fence_arrivals:
            raise CollectiveMismatchError(f"rank {rank} entered the fence twice")
        self._fence_arrivals[rank] = self.clock.now(rank)
        if set(self._fence_arrivals) != set(self.group):
            return False
        release = max(self._fence_arrivals.values())
        self._fence_arrivals = {}
        if self._fence_open:
            self.epoch_state = "waiting"
            self._wait_crash = None
            self._persist = True
            self.clock.wait_until(self.target, release)
            self._commit()
            release = self.last_commit_time
        for m in self.group:
            self.clock.wait_until(m, release)
        self.epoch_state = "fence"
        self._fence_open = True
        self.staging = bytearray(self.backing.read_active())
        self.access = {m: _Access() for m in self.group}
        return True

    def settle(self) -> None:
        """Simulator timeout: a fence some member never joined is a deadlock."""
        if self._fence_arrivals:
            missing = sorted(set(self.group) - set(self._fence_arrivals))
            first = min(self._fence_arrivals.values())
            for r in self._fence_arrivals:
                self.clock.wait_until(r, first + self.fence_timeout)
            self._fence_arrivals = {}
            raise CollectiveMismatchError(f"fence timed out waiting for ranks {missing}")

    # passive target ----------------------------------------------------

    def win_lock(self, origin: int, *args, **kwargs):
        raise UnsupportedError("passive-target synchronization is not supported")

    def win_unlock(self, origin: int, *args, **kwargs):
        raise UnsupportedError("passive-target synchronization is not supported")

    # internals ---------------------------------------------------------

    def _completed(self, origin: int) -> bool:
        acc = self.access.get(origin)
        return acc is not None and acc.state == "completed"

    def _require_access(self, origin: int) -> None:
        acc = self.access.get(origin)
        if self.epoch_state == "fence":
            if acc is None:
                raise EpochError(f"rank {origin} is not in the fence epoch")
            return
        if acc is None or acc.state != "started":
            raise EpochError(f"rank {origin} is not inside an access epoch on rank {self.target}")

    def _commit(self) -> None:
        start = max([self.clock.now(self.target), self.post_time]
                    + [a.complete_time for a in self.access.values()])
        self.clock.wait_until(self.target, start)
        crash_at, self._wait_crash = self._wait_crash, None
        payload = bytes(self.staging)
        if not self._persist:
            if not self.durable:
                self.backing.commit(payload, self.epoch_iteration)
            self._finish_epoch()
            return
        try:
            written = self.backing.commit(payload, self.epoch_iteration, crash_at=crash_at)
        except SimulatedCrash:
            self.epoch_state = "crashed"
            self.staging = None
            raise
        self.bytes_committed += written
        cost = self.cost.persist(written) if self.durable else 0.0
        self.last_commit_time = self.clock.advance(self.target, cost)
        self._finish_epoch()

    def _finish_epoch(self) -> None:
        self.epochs_closed += 1
        self.epoch_state = "idle"
        self.staging = None
        self.access = {}
        if not self._fence_open:
            self.group = frozenset()

    def reopen(self) -> None:
        """Target restarted after a crash: volatile epoch state is gone."""
        self.abort()
        self._fence_arrivals = {}
        self._fence_open = False
        if self.durable:
            self.backing.recover()
