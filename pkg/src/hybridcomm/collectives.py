"""Ring collectives with a codec on every hop, simulated over all ranks at once.

Each function receives one buffer per communicator position and returns one
result per position. When a :class:`~hybridcomm.netsim.Simulator` is passed,
the participants' clocks are advanced and one :class:`TraceEvent` is logged.

Reduction order is fixed so results are bit-reproducible: the ring runs over
ascending positions, and chunk ``c`` of a reduce-scatter is accumulated as
``((g[c+1] + g[c+2]) + ...) + g[c]`` (indices mod p), i.e. a left fold
starting at position ``c + 1``. Partial sums are decompressed, added to the
local contribution and recompressed on every hop. All-gather compresses each
shard once at its origin and forwards the compressed bytes; the origin keeps
the decoded copy too, so every rank ends with identical values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .codec import CodecKind, CodecSpec, as_float_buffer, compress, decompress, roundtrip
from .netsim import Simulator, TraceEvent

ALL_REDUCE = "AllReduce"
ALL_GATHER = "AllGather"
REDUCE_SCATTER = "ReduceScatter"
P2P = "P2P"


class BadChunking(ValueError):
    """Buffer lengths that the ring cannot split evenly."""


@dataclass(frozen=True)
class Communicator:
    ranks: tuple[int, ...]

    def __post_init__(self):
        ranks = tuple(int(r) for r in self.ranks)
        if not ranks:
            raise ValueError("communicator needs at least one rank")
        if len(set(ranks)) != len(ranks):
            raise ValueError(f"duplicate ranks in communicator {ranks}")
        object.__setattr__(self, "ranks", ranks)

    @property
    def size(self) -> int:
        return len(self.ranks)

    def position(self, rank: int) -> int:
        return self.ranks.index(rank)


def _path_name(path) -> str:
    return path.value if isinstance(path, enum.Enum) else str(path)


def _check_inputs(comm: Communicator, bufs) -> list[np.ndarray]:
    if len(bufs) != comm.size:
        raise ValueError(f"expected {comm.size} buffers, one per rank, got {len(bufs)}")
    return [as_float_buffer(b) for b in bufs]


class _Rounds:
    """Accumulates per-round, per-position costs for one collective."""

    def __init__(self, comm: Communicator, spec: CodecSpec, sim: Simulator | None):
        self.comm, self.spec, self.sim = comm, spec, sim
        self.duration = 0.0
        self.rounds = 0
        self.raw = np.zeros(comm.size, dtype=np.int64)
        self.wire = np.zeros(comm.size, dtype=np.int64)

    def add_round(self, raw_bytes, wire_bytes, compress_at_sender=True):
        p = self.comm.size
        self.rounds += 1
        self.raw += raw_bytes
        self.wire += wire_bytes
        if self.sim is None:
            return
        topo = self.sim.topology
        worst = 0.0
        for i in range(p):
            src, dst = self.comm.ranks[i], self.comm.ranks[(i + 1) % p]
            t = topo.transfer_time(int(wire_bytes[i]), topo.link_class(src, dst))
            t += topo.codec_time(int(raw_bytes[i]), self.spec)  # decompress at receiver
            if compress_at_sender:
                t += topo.codec_time(int(raw_bytes[i]), self.spec)
            worst = max(worst, t)
        self.duration += worst

    def finish(self, path, collective: str):
        if self.sim is None:
            return
        self.sim.clock.synchronize(self.comm.ranks, self.duration)
        self.sim.record(TraceEvent(
            step=self.sim.step, path=_path_name(path), collective=collective, comm_size=self.comm.size,
            raw_bytes=int(self.raw.max()), wire_bytes=int(self.wire.max()), duration=self.duration,
            round_count=self.rounds, codec=str(self.spec)))


def p2p(src: int, dst: int, buf, spec: CodecSpec, sim: Simulator | None = None, path="PpP2p") -> np.ndarray:
    """Send ``buf`` from ``src`` to ``dst``; returns what ``dst`` decodes."""
    if src == dst:
        raise ValueError("p2p needs distinct source and destination")
    values = as_float_buffer(buf)
    received, wire = roundtrip(spec, values)
    if sim is not None:
        topo = sim.topology
        ctime = topo.codec_time(values.nbytes, spec)
        xfer = topo.transfer_time(wire, topo.link_class(src, dst))
        clock = sim.clock
        # blocking send; the receiver decodes once the bytes have landed
        clock.advance(src, ctime + xfer)
        clock.times[dst] = max(clock.times[dst], clock.times[src]) + ctime
        sim.record(TraceEvent(step=sim.step, path=_path_name(path), collective=P2P, comm_size=2,
                              raw_bytes=values.nbytes, wire_bytes=wire, duration=2 * ctime + xfer,
                              round_count=1, codec=str(spec)))
    return received


def _reduce_scatter(comm: Communicator, bufs: list[np.ndarray], spec: CodecSpec, acct: _Rounds) -> list[np.ndarray]:
    p = comm.size
    n = bufs[0].size
    if any(b.size != n for b in bufs):
        raise BadChunking(f"buffer lengths differ across ranks: {[b.size for b in bufs]}")
    if n % p:
        raise BadChunking(f"buffer length {n} is not divisible by communicator size {p}")
    k = n // p
    chunks = [[b[c * k:(c + 1) * k] for c in range(p)] for b in bufs]
    # partial[i]: the running sum position i forwards next round
    partial = [chunks[i][(i - 1) % p].copy() for i in range(p)]
    for rnd in range(p - 1):
        raw = np.full(p, 4 * k, dtype=np.int64)
        wire = np.zeros(p, dtype=np.int64)
        received = [None] * p
        for i in range(p):
            received[(i + 1) % p], wire[i] = roundtrip(spec, partial[i])
        for j in range(p):
            c = (j - 2 - rnd) % p  # chunk held by the sender j-1 this round
            partial[j] = received[j] + chunks[j][c]
        acct.add_round(raw, wire)
    # after p-1 rounds position i holds the full sum of chunk i
    return partial


def _allgather(comm: Communicator, shards: list[np.ndarray], spec: CodecSpec, acct: _Rounds) -> list[np.ndarray]:
    p = comm.size
    k = shards[0].size
    if any(s.size != k for s in shards):
        raise BadChunking(f"shard lengths differ across ranks: {[s.size for s in shards]}")
    if spec.kind == CodecKind.IDENTITY:
        decoded = [s.copy() for s in shards]
        wires = [4 * k] * p
    else:
        cbufs = [compress(spec, s) for s in shards]
        decoded = [decompress(cb) for cb in cbufs]
        wires = [cb.wire_bytes for cb in cbufs]
    for rnd in range(p - 1):
        raw = np.full(p, 4 * k, dtype=np.int64)
        wire = np.array([wires[(i - rnd) % p] for i in range(p)], dtype=np.int64)
        acct.add_round(raw, wire, compress_at_sender=(rnd == 0))
    full = np.concatenate(decoded) if decoded else np.zeros(0, dtype=np.float32)
    return [full.copy() for _ in range(p)]


def ring_reduce_scatter(comm: Communicator, bufs, spec: CodecSpec, sim: Simulator | None = None,
                        path="ReduceScatter") -> list[np.ndarray]:
    """Position i ends with chunk i of the element-wise sum."""
    bufs = _check_inputs(comm, bufs)
    if comm.size == 1:
        return [bufs[0].copy()]
    acct = _Rounds(comm, spec, sim)
    out = _reduce_scatter(comm, bufs, spec, acct)
    acct.finish(path, REDUCE_SCATTER)
    return out


def ring_allgather(comm: Communicator, shards, spec: CodecSpec, sim: Simulator | None = None,
                   path="AllGather") -> list[np.ndarray]:
    """Every position ends with the shards concatenated in position order."""
    shards = _check_inputs(comm, shards)
    if comm.size == 1:
        return [shards[0].copy()]
    acct = _Rounds(comm, spec, sim)
    out = _allgather(comm, shards, spec, acct)
    acct.finish(path, ALL_GATHER)
    return out


def allreduce(comm: Communicator, bufs, spec: CodecSpec, sim: Simulator | None = None, path="AllReduce",
              average: bool = False) -> list[np.ndarray]:
    """Reduce-scatter followed by all-gather; ``average`` divides by the size afterwards."""
    bufs = _check_inputs(comm, bufs)
    p = comm.size
    if p == 1:
        return [bufs[0].copy()]
    acct = _Rounds(comm, spec, sim)
    shards = _reduce_scatter(comm, bufs, spec, acct)
    out = _allgather(comm, shards, spec, acct)
    acct.finish(path, ALL_REDUCE)
    if average:
        out = [o / np.float32(p) for o in out]
    return out
