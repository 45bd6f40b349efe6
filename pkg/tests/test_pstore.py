import warnings

import numpy as np
import pytest

from nvmesr.errors import (
    ColdStartError,
    PersistenceUnavailableError,
    RedundancyWarning,
    UnavailableError,
)
from nvmesr.esr import RecoveryRecord, entry_payload
from nvmesr.pstore import (
    LocalSlotBackend,
    PeerRamBackend,
    PrdWindowBackend,
    fetch,
    frame_bytes,
    make_backend,
    persist,
)

SIZES = [250, 250, 250, 250]


def _record(owner, j, m=250, seed=0):
    rng = np.random.default_rng(seed + 31 * j + owner)
    return RecoveryRecord.build(owner, j, rng.normal(size=m), rng.normal(size=m), rng.normal())


@pytest.fixture(params=["peer_ram", "local_slot", "prd_window"])
def backend(request, tmp_path):
    return make_backend(request.param, SIZES, c=2, directory=tmp_path)


def test_fetch_persist_is_identity(backend):
    for owner in range(4):
        rec = _record(owner, 7)
        persist(backend, owner, rec)
        assert fetch(backend, owner, requester=(owner + 1) % 4).same_as(rec)


def test_fetch_without_records_is_cold_start(backend):
    with pytest.raises(ColdStartError):
        fetch(backend, 0, 1)


def test_fetch_newest_pair(backend):
    persist(backend, 1, _record(1, 3))
    newer = _record(1, 9)
    persist(backend, 1, newer)
    assert fetch(backend, 1, 0).same_as(newer)
    if backend.durable:
        # parity windows still hold the older pair
        assert fetch(backend, 1, 0, iteration=3).same_as(_record(1, 3))
    else:
        # holders keep only the newest pair
        with pytest.raises(ColdStartError):
            fetch(backend, 1, 0, iteration=3)


def test_persist_same_iteration_twice(tmp_path):
    be = LocalSlotBackend(SIZES, tmp_path)
    rec = _record(0, 5)
    persist(be, 0, rec)
    persist(be, 0, rec)
    w = be.window(0, 5)
    assert sorted(f.generation for f in w.backing.scan()) == [1, 2]
    assert fetch(be, 0, 0).same_as(rec)


def test_prd_bytes_per_persistence_iteration(tmp_path):
    sizes = [250] * 4
    be = PrdWindowBackend(sizes, tmp_path)
    entries = {s: entry_payload(np.ones(250), 0.5) for s in range(4)}
    assert be.persist_iteration(5, entries) == set()
    # one slice plus beta per rank on the wire: n values in total, plus 4 scalars
    assert be.wire_bytes == 8 * (1000 + 4)
    assert be.values_written == 1000
    assert be.physical_written() == 4 * frame_bytes(250)


@pytest.mark.parametrize("kind", ["local_slot", "prd_window"])
def test_crash_mid_persist_returns_previous_pair(tmp_path, kind):
    be = make_backend(kind, SIZES, directory=tmp_path)
    old = _record(2, 6)
    persist(be, 2, old)
    for cut in (0, 1, 100, 2000, frame_bytes(250) - 1):
        torn = be.persist_iteration(7, {2: entry_payload(np.full(250, 9.0), 1.0)}, crash={2: cut})
        assert torn == {2}
        be.on_failure([2])
        be.on_revive([2])
        be.rewind(6)
        assert fetch(be, 2, 2).same_as(old)


def test_local_slot_unavailable_while_owner_down(tmp_path):
    be = LocalSlotBackend(SIZES, tmp_path)
    persist(be, 3, _record(3, 4))
    be.on_failure([3])
    with pytest.raises(UnavailableError):
        fetch(be, 3, 0)
    be.on_revive([3])
    assert fetch(be, 3, 3).same_as(_record(3, 4))


def test_prd_serves_any_live_rank_and_can_be_down(tmp_path):
    be = PrdWindowBackend(SIZES, tmp_path)
    persist(be, 3, _record(3, 4))
    be.on_failure([3])
    assert fetch(be, 3, 1).same_as(_record(3, 4))
    be.prd_alive = False
    with pytest.raises(PersistenceUnavailableError):
        fetch(be, 3, 1)
    with pytest.raises(PersistenceUnavailableError):
        persist(be, 0, _record(0, 4))


def test_peer_ram_copies_at_c_holders():
    be = PeerRamBackend(SIZES, c=1)
    persist(be, 0, _record(0, 4))
    assert [h for h in range(4) if be.store.iterations(h, 0)] == [1]
    be2 = PeerRamBackend(SIZES, c=2)
    persist(be2, 0, _record(0, 4))
    assert [h for h in range(4) if be2.store.iterations(h, 0)] == [1, 2]
    assert be2.resident_values() == 2 * 2 * 250


def test_peer_ram_one_holder_dead():
    be = PeerRamBackend(SIZES, c=2)
    rec = _record(0, 4)
    persist(be, 0, rec)
    be.on_failure([1])
    assert fetch(be, 0, 3).same_as(rec)
    with pytest.warns(RedundancyWarning):
        persist(be, 0, _record(0, 8))
    be.on_failure([2])
    with pytest.raises(UnavailableError):
        fetch(be, 0, 3)
    with pytest.raises(PersistenceUnavailableError):
        persist(be, 0, _record(0, 10))


def test_peer_ram_rereplicate():
    be = PeerRamBackend(SIZES, c=2)
    for s in range(4):
        persist(be, s, _record(s, 6))
    be.on_failure([1])
    be.on_revive([1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert be.rereplicate({1}, 6) == []
    assert be.store.pair(1, 0)[0] == 6


def test_durable_resident_is_double_buffered(tmp_path):
    be = LocalSlotBackend(SIZES, tmp_path)
    assert be.resident_bytes() == 4 * 2 * 2 * frame_bytes(250)
