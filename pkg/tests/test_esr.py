import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvmesr.cluster import SimComm
from nvmesr.errors import (
    ColdStartError,
    CorruptRecordError,
    PlacementError,
    StaleRecordError,
    UnrecoverableError,
)
from nvmesr.esr import (
    RecoveryRecord,
    RedundancyMessage,
    RedundancyStore,
    aspmv,
    decode_entry,
    entry_payload,
    holders_for,
    reconstruct,
)
from nvmesr.linalg import CsrMatrix, Partition, Preconditioner, gen_poisson_7pt, spmv
from nvmesr.pcg import SolveConfig, run


def test_holders():
    assert holders_for(0, 4, 3) == [1, 2, 3]
    assert holders_for(3, 4, 1) == [0]
    assert holders_for(2, 4, 0) == []
    with pytest.raises(PlacementError):
        holders_for(0, 4, 4)


@pytest.mark.parametrize("proc", [2, 4, 8])
def test_aspmv_bitwise_equal_to_spmv(poisson8, proc):
    part = Partition.balanced(512, proc)
    comm = SimComm(poisson8, part)
    v = np.random.default_rng(proc).normal(size=512)
    Ap, msgs = aspmv(comm, part.split(v), 4, 0.5, proc - 1)
    assert np.array_equal(np.concatenate(Ap), spmv(poisson8, v))
    assert len(msgs) == proc * (proc - 1)


def test_aspmv_holder_storage_full_ft():
    A = gen_poisson_7pt(10, 10, 4)
    part = Partition.balanced(400, 4)
    comm = SimComm(A, part)
    store = RedundancyStore(4)
    _, msgs = aspmv(comm, part.split(np.ones(400)), 1, 0.0, 3)
    for m in msgs:
        store.receive(m)
    for owner in range(4):
        holding = [h for h in range(4) if store.iterations(h, owner)]
        assert holding == sorted(holders_for(owner, 4, 3))
    assert store.values_resident() == 1200  # 3 copies x 100 entries x 4 owners


def test_aspmv_piggyback_counts_match_halo(poisson8):
    part = Partition.balanced(512, 8)
    comm = SimComm(poisson8, part)
    _, msgs = aspmv(comm, part.split(np.ones(512)), 1, 0.0, 1)
    for m in msgs:
        # one z-plane per rank: the next rank already receives the whole slice,
        # except across the wrap-around from rank 7 to rank 0
        expect = 0 if m.owner == 7 else 64
        assert m.piggybacked == comm.plan.halo_count(m.owner, m.holder) == expect
        assert m.extra_wire_bytes == 8 * (64 - expect + 1)


def test_aspmv_rejects_dead_holder(poisson4):
    part = Partition.balanced(64, 4)
    with pytest.raises(PlacementError):
        aspmv(SimComm(poisson4, part), part.split(np.ones(64)), 1, 0.0, 2, alive=[0, 1, 3])


def _msg(owner, holder, j, n=3):
    return RedundancyMessage(owner, holder, j, float(j), np.full(n, float(j)), 0)


def test_store_keeps_last_pair_plus_pending():
    store = RedundancyStore(2)
    for j in (5, 6):
        store.receive(_msg(0, 1, j))
    assert store.iterations(1, 0) == [5, 6]
    store.receive(_msg(0, 1, 10))  # first half of the next pair
    assert store.iterations(1, 0) == [5, 6, 10]
    assert store.pair(1, 0)[0] == 6
    store.receive(_msg(0, 1, 11))
    assert store.iterations(1, 0) == [10, 11]
    assert store.values_resident(pairs_only=True) == 6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=30))
def test_store_never_holds_more_than_one_complete_pair(js):
    store = RedundancyStore(2)
    for j in sorted(set(js)):
        store.receive(_msg(0, 1, j))
        its = store.iterations(1, 0)
        pairs = [k for k in its if k - 1 in its]
        assert len(pairs) <= 1
        assert len(its) <= 3


def test_store_rewind_and_drop():
    store = RedundancyStore(3)
    for j in (1, 2, 3):
        store.receive(_msg(0, 1, j))
    store.rewind(2)
    assert store.iterations(1, 0) == [2]
    store.drop_holder(1)
    assert store.pair(1, 0) is None


def test_record_roundtrip_and_tamper():
    rec = RecoveryRecord.build(2, 7, [1.0, 2.0], [3.0, 4.0], 0.25)
    back = RecoveryRecord.from_bytes(rec.to_bytes())
    assert back.same_as(rec) and back.j == 7 and back.beta_prev == 0.25
    bad = RecoveryRecord(2, 7, rec.p_prev, np.array([3.0, 4.5]), 0.25, rec.checksum)
    with pytest.raises(CorruptRecordError):
        bad.verify()


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_any_flipped_byte_fails_checksum(data):
    rec = RecoveryRecord.build(1, 9, np.linspace(0, 1, 20), np.linspace(1, 2, 20), -0.5)
    buf = bytearray(rec.to_bytes())
    pos = data.draw(st.integers(0, len(buf) - 1))
    bit = data.draw(st.integers(0, 7))
    buf[pos] ^= 1 << bit
    with pytest.raises(CorruptRecordError):
        RecoveryRecord.from_bytes(bytes(buf))


def test_entry_payload_roundtrip():
    beta, p = decode_entry(entry_payload([1.5, -2.0], 0.75))
    assert beta == 0.75 and p.tolist() == [1.5, -2.0]


def test_reconstruct_identity_system():
    n = 8
    A = CsrMatrix.identity(n)
    part = Partition.balanced(n, 2)
    b = np.arange(1.0, 9.0)
    p_prev, p_curr, beta = np.ones(4), np.full(4, 3.0), 0.5
    rec = RecoveryRecord.build(1, 4, p_prev, p_curr, beta)
    out = reconstruct(A, Preconditioner.identity(n), b, part, [1],
                      {0: np.zeros(4)}, {0: np.zeros(4)}, {1: rec})[1]
    z = p_curr - beta * p_prev
    assert np.array_equal(out["r"], z)
    assert np.allclose(out["x"], b[4:] - z, rtol=0, atol=1e-14)


def _reference(A, b, proc, j):
    sol = run(SolveConfig(tol=0.0, max_iter=j), A, b, proc=proc, record_states=True)
    return sol.history


@pytest.mark.parametrize("failed", [[3], [2, 5]])
def test_reconstruct_matches_reference(poisson8, failed):
    b = np.ones(512)
    part = Partition.balanced(512, 8)
    hist = _reference(poisson8, b, 8, 7)
    beta6 = run(SolveConfig(tol=0.0, max_iter=7), poisson8, b, proc=8).trace[7].beta
    records = {f: RecoveryRecord.build(f, 7, hist[6]["p"][part.blocks[f][0]:part.blocks[f][1]],
                                       hist[7]["p"][part.blocks[f][0]:part.blocks[f][1]], beta6)
               for f in failed}
    surv = [s for s in range(8) if s not in failed]
    xs = {s: part.split(hist[7]["x"])[s] for s in surv}
    rs = {s: part.split(hist[7]["r"])[s] for s in surv}
    out = reconstruct(poisson8, Preconditioner.jacobi(poisson8), b, part, failed, xs, rs, records, c=2)
    for f in failed:
        for k in "xrpz":
            ref = part.split(hist[7][k])[f]
            assert np.max(np.abs(out[f][k] - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_reconstruct_errors(poisson4):
    part = Partition.balanced(64, 4)
    pre = Preconditioner.jacobi(poisson4)
    b = np.ones(64)
    z16 = np.zeros(16)
    surv = {s: z16 for s in (0, 1)}
    recs = {2: RecoveryRecord.build(2, 5, z16, z16, 0.1), 3: RecoveryRecord.build(3, 6, z16, z16, 0.1)}
    with pytest.raises(UnrecoverableError):
        reconstruct(poisson4, pre, b, part, [2, 3], surv, surv, recs, c=1)
    with pytest.raises(StaleRecordError):
        reconstruct(poisson4, pre, b, part, [2, 3], surv, surv, recs, c=2)
    with pytest.raises(ColdStartError):
        reconstruct(poisson4, pre, b, part, [2, 3], surv, surv, {2: recs[2]}, c=2)
    tampered = RecoveryRecord(2, 5, z16, np.ones(16), 0.1, recs[2].checksum)
    with pytest.raises(CorruptRecordError):
        reconstruct(poisson4, pre, b, part, [2], {s: z16 for s in (0, 1, 3)},
                    {s: z16 for s in (0, 1, 3)}, {2: tampered})
