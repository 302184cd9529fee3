from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridcomm.codec import CodecSpec, NonFiniteInput, block_exponents, error_bound, roundtrip
from hybridcomm.collectives import BadChunking, Communicator, allreduce, p2p, ring_allgather, ring_reduce_scatter
from hybridcomm.netsim import Simulator, Topology

from oracles import concat, ring_fold

ID = CodecSpec.identity()
LL = CodecSpec.lossless()


def u32(a):
    return np.asarray(a, dtype=np.float32).view(np.uint32)


def rand_bufs(rng, p, k):
    return [(rng.standard_normal(p * k) * 10 ** rng.uniform(-3, 3)).astype(np.float32) for _ in range(p)]


# --- worked examples ------------------------------------------------------------


def test_reduce_scatter_two_ranks():
    out = ring_reduce_scatter(Communicator((0, 1)), [[1, 2], [3, 4]], ID)
    assert [o.tolist() for o in out] == [[4.0], [6.0]]


def test_allgather_two_ranks():
    out = ring_allgather(Communicator((0, 1)), [[1], [2]], ID)
    assert [o.tolist() for o in out] == [[1.0, 2.0], [1.0, 2.0]]


def test_allreduce_two_ranks():
    out = allreduce(Communicator((0, 1)), [[1, 2], [3, 4]], ID)
    assert [o.tolist() for o in out] == [[4.0, 6.0], [4.0, 6.0]]
    avg = allreduce(Communicator((0, 1)), [[1, 2], [3, 4]], ID, average=True)
    assert avg[0].tolist() == [2.0, 3.0]


def test_fold_order_is_observable():
    # chunk 0 folds positions 1, 2, 0: (1e8 + 1) + -1e8 = 0 in float32; chunk 1 folds 2, 0, 1
    bufs = [np.array([-1e8, 1.0], np.float32), np.array([1e8, 1e8], np.float32), np.array([1.0, -1e8], np.float32)]
    bufs = [np.concatenate([b, [0.0]]).astype(np.float32) for b in bufs]
    shards = ring_reduce_scatter(Communicator((0, 1, 2)), bufs, ID)
    assert shards[0][0] == np.float32(np.float32(1e8) + np.float32(1.0)) + np.float32(-1e8)
    assert concat(shards).tolist() == ring_fold(bufs).tolist()


# --- oracles ----------------------------------------------------------------------


@pytest.mark.parametrize("p", [2, 3, 4, 8])
def test_identity_matches_oracles(p):
    rng = np.random.default_rng(p)
    comm = Communicator(tuple(range(p)))
    for _ in range(20):
        bufs = rand_bufs(rng, p, int(rng.integers(1, 50)))
        expect = ring_fold(bufs)
        rs = ring_reduce_scatter(comm, bufs, ID)
        assert np.array_equal(u32(concat(rs)), u32(expect))
        ar = allreduce(comm, bufs, ID)
        for out in ar:
            assert np.array_equal(u32(out), u32(expect))
        shards = [b[: b.size // p] for b in bufs]
        for out in ring_allgather(comm, shards, ID):
            assert np.array_equal(u32(out), u32(concat(shards)))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 40), st.integers(0, 2**31))
def test_lossless_is_transparent(p, k, seed):
    rng = np.random.default_rng(seed)
    comm = Communicator(tuple(range(p)))
    bufs = rand_bufs(rng, p, k)
    for fn in (allreduce, ring_reduce_scatter):
        a, b = fn(comm, bufs, ID), fn(comm, bufs, LL)
        assert all(np.array_equal(u32(x), u32(y)) for x, y in zip(a, b))
    a, b = ring_allgather(comm, bufs, ID), ring_allgather(comm, bufs, LL)
    assert all(np.array_equal(u32(x), u32(y)) for x, y in zip(a, b))


@pytest.mark.parametrize("spec", [ID, LL, CodecSpec.fixed_rate(8), CodecSpec.fixed_rate(19)])
def test_every_rank_agrees(spec):
    p = 4
    rng = np.random.default_rng(7)
    bufs = rand_bufs(rng, p, 70)
    comm = Communicator((3, 1, 0, 2))
    for outs in (allreduce(comm, bufs, spec), ring_allgather(comm, bufs, spec)):
        assert all(np.array_equal(u32(o), u32(outs[0])) for o in outs)


# --- lossy bounds --------------------------------------------------------------------


def _per_value_bound(rate, magnitude):
    return np.repeat(error_bound(rate, block_exponents(magnitude)), 64)[: magnitude.size]


def test_reduce_scatter_lossy_bound():
    p, rate = 4, 16
    rng = np.random.default_rng(11)
    comm = Communicator(tuple(range(p)))
    for _ in range(10):
        bufs = rand_bufs(rng, p, 128)
        exact = np.sum([b.astype(np.float64) for b in bufs], axis=0)
        got = concat(ring_reduce_scatter(comm, bufs, CodecSpec.fixed_rate(rate)))
        # partial sums never exceed the sum of magnitudes; one quantisation per hop
        mag = np.sum([np.abs(b.astype(np.float64)) for b in bufs], axis=0).astype(np.float32)
        k = 128
        bound = np.concatenate([_per_value_bound(rate, mag[c * k:(c + 1) * k]) for c in range(p)])
        assert np.all(np.abs(got - exact) <= (p - 1) * bound + 1e-5 * np.abs(exact))


def test_allgather_lossy_is_one_roundtrip():
    spec = CodecSpec.fixed_rate(8)
    rng = np.random.default_rng(3)
    shards = [rng.standard_normal(100).astype(np.float32) for _ in range(4)]
    out = ring_allgather(Communicator((0, 1, 2, 3)), shards, spec)
    once = concat([roundtrip(spec, s)[0] for s in shards])
    assert np.array_equal(u32(out[2]), u32(once))


def test_allreduce_lossy_bound():
    p, rate = 4, 16
    rng = np.random.default_rng(4)
    bufs = rand_bufs(rng, p, 64)
    exact = np.sum([b.astype(np.float64) for b in bufs], axis=0)
    mag = np.sum([np.abs(b.astype(np.float64)) for b in bufs], axis=0).astype(np.float32)
    got = allreduce(Communicator(tuple(range(p))), bufs, CodecSpec.fixed_rate(rate))[0]
    bound = np.concatenate([_per_value_bound(rate, mag[c * 64:(c + 1) * 64]) for c in range(p)])
    assert np.all(np.abs(got - exact) <= p * bound + 1e-5 * np.abs(exact))


def test_lossy_rejects_non_finite():
    bufs = [np.array([1.0, np.nan], np.float32), np.array([1.0, 2.0], np.float32)]
    with pytest.raises(NonFiniteInput):
        allreduce(Communicator((0, 1)), bufs, CodecSpec.fixed_rate(8))


# --- errors ------------------------------------------------------------------------------


def test_bad_chunking():
    comm = Communicator((0, 1, 2))
    with pytest.raises(BadChunking):
        ring_reduce_scatter(comm, [np.ones(4, np.float32)] * 3, ID)
    with pytest.raises(BadChunking):
        ring_allgather(comm, [np.ones(2), np.ones(2), np.ones(3)], ID)


def test_communicator_rejects_duplicates():
    with pytest.raises(ValueError):
        Communicator((0, 1, 1))


def test_p2p_same_rank_rejected():
    with pytest.raises(ValueError):
        p2p(1, 1, np.ones(3), ID)


# --- accounting -----------------------------------------------------------------------------


def _sim(**kw):
    return Simulator(Topology(**kw))


def test_allreduce_event_accounting():
    sim = _sim(num_nodes=2, gpus_per_node=4)
    p, n = 4, 4096
    bufs = [np.ones(n, np.float32)] * p
    allreduce(Communicator((0, 1, 2, 3)), bufs, ID, sim, "DpAllReduce")
    (ev,) = sim.events
    assert ev.raw_bytes == 2 * (p - 1) * (4 * n) // p
    assert ev.wire_bytes == ev.raw_bytes
    assert ev.round_count == 2 * (p - 1)
    assert ev.collective == "AllReduce" and ev.path == "DpAllReduce" and ev.comm_size == p
    # all links intra-node: 6 rounds of 4 KiB each
    assert ev.duration == pytest.approx(6 * (2e-6 + 4096 / 50e9), rel=1e-12)
    assert np.all(sim.clock.times[:4] == ev.duration)
    assert np.all(sim.clock.times[4:] == 0)


def test_allreduce_two_ranks_across_nodes_timing():
    sim = _sim(num_nodes=2, gpus_per_node=1, inter_lat=5e-6, inter_bw=12.5e9)
    allreduce(Communicator((0, 1)), [np.ones(2, np.float32)] * 2, ID, sim)
    # reduce-scatter and all-gather each move one 4-byte chunk over the inter-node link
    assert sim.events[0].duration == pytest.approx(2 * (5e-6 + 4 / 12.5e9), rel=1e-12)


def test_codec_time_charged_per_hop():
    topo = dict(num_nodes=1, gpus_per_node=2, codec_bw=1e9)
    a, b = _sim(**topo), _sim(**topo)
    bufs = [np.ones(64, np.float32)] * 2
    allreduce(Communicator((0, 1)), bufs, ID, a)
    allreduce(Communicator((0, 1)), bufs, CodecSpec.fixed_rate(8), b)
    # each hop moves a 32-value (128-byte) chunk: compress + decompress on both phases
    codec = 4 * 128 / 1e9
    wire = 1 + 64 * 8 // 8  # the chunk fills one zero-padded 64-value block at rate 8
    expect = 2 * (2e-6 + wire / 50e9) + codec
    assert b.events[0].duration == pytest.approx(expect, rel=1e-12)
    assert b.events[0].wire_bytes < a.events[0].wire_bytes


def test_p2p_timing_and_clock():
    sim = _sim(num_nodes=2, gpus_per_node=4)
    sim.clock.advance(4, 1.0)
    out = p2p(0, 4, np.arange(1024, dtype=np.float32), ID, sim)
    assert out.tolist() == list(range(1024))
    xfer = 5e-6 + 4096 / 12.5e9
    assert sim.clock.times[0] == pytest.approx(xfer)
    assert sim.clock.times[4] == 1.0  # receiver already past the arrival
    (ev,) = sim.events
    assert ev.collective == "P2P" and ev.raw_bytes == 4096 and ev.duration == pytest.approx(xfer)


def test_p2p_lossy_matches_direct_roundtrip():
    ramp = np.linspace(-3, 3, 64, dtype=np.float32)
    spec = CodecSpec.fixed_rate(8)
    out = p2p(0, 1, ramp, spec)
    assert np.array_equal(u32(out), u32(roundtrip(spec, ramp)[0]))
    assert np.all(np.abs(out - ramp) <= error_bound(8, block_exponents(ramp))[0])


def test_single_rank_group_is_free():
    sim = _sim(num_nodes=1, gpus_per_node=1)
    out = allreduce(Communicator((0,)), [np.arange(3, dtype=np.float32)], CodecSpec.fixed_rate(8), sim)
    assert out[0].tolist() == [0.0, 1.0, 2.0]
    assert sim.events == [] and sim.clock.elapsed == 0
