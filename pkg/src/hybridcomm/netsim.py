"""Alpha-beta cost model of a GPU cluster and the simulation clock.

Two link classes: intra-node (NVLink-class) and inter-node (InfiniBand).
A message costs ``latency + bytes / bandwidth``; codec work costs
``raw_bytes / codec_bw`` for each of compression and decompression.
"""

from __future__ import annotations

import enum
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .codec import CodecKind, CodecSpec

PRESET_ENV = "HYBRIDCOMM_PRESET"


class LinkClass(enum.Enum):
    SELF = "self"
    INTRA = "intra"
    INTER = "inter"


@dataclass(frozen=True)
class Topology:
    num_nodes: int = 2
    gpus_per_node: int = 4
    intra_bw: float = 50e9  # bytes/s
    inter_bw: float = 12.5e9  # bytes/s, 100 Gb/s EDR
    intra_lat: float = 2e-6  # s
    inter_lat: float = 5e-6  # s
    codec_bw: float = 1e12  # bytes/s of raw data, per direction; calibrated, not measured
    compute_flops: float = 1.5e12  # sustained flop/s per rank on small GEMMs

    def __post_init__(self):
        for name in ("num_nodes", "gpus_per_node"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        for name in ("intra_bw", "inter_bw", "intra_lat", "inter_lat", "codec_bw", "compute_flops"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be > 0, got {value!r}")

    @property
    def world_size(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_of(self, rank: int) -> int:
        self._check_rank(rank)
        return rank // self.gpus_per_node

    def link_class(self, a: int, b: int) -> LinkClass:
        if self.node_of(a) != self.node_of(b):
            return LinkClass.INTER
        return LinkClass.SELF if a == b else LinkClass.INTRA

    def transfer_time(self, nbytes: int, link: LinkClass) -> float:
        if nbytes < 0:
            raise ValueError("nbytes must be non-negative")
        if link is LinkClass.SELF:
            return 0.0
        if link is LinkClass.INTRA:
            return self.intra_lat + nbytes / self.intra_bw
        return self.inter_lat + nbytes / self.inter_bw

    def codec_time(self, raw_bytes: int, spec: CodecSpec) -> float:
        """Time for one compression (or one decompression) of ``raw_bytes``."""
        if raw_bytes < 0:
            raise ValueError("raw_bytes must be non-negative")
        if spec.kind == CodecKind.IDENTITY:
            return 0.0
        return raw_bytes / self.codec_bw

    def with_nodes(self, num_nodes: int) -> Topology:
        return replace(self, num_nodes=num_nodes)

    def to_dict(self) -> dict:
        return asdict(self)

    def _check_rank(self, rank: int):
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside [0, {self.world_size})")


PRESETS = {
    # 4 V100 per node, EDR between nodes; NVLink pairs flattened to one link class
    "lassen-like": Topology(),
    "desk-2x2": Topology(num_nodes=2, gpus_per_node=2, intra_bw=20e9, inter_bw=1.25e9,
                         intra_lat=5e-6, inter_lat=20e-6, codec_bw=2e11, compute_flops=1e12),
}


def preset(name: str | None = None) -> Topology:
    """Built-in topology; ``None`` reads HYBRIDCOMM_PRESET and falls back to lassen-like."""
    name = name or os.environ.get(PRESET_ENV) or "lassen-like"
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown topology preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class TraceEvent:
    step: int
    path: str
    collective: str
    comm_size: int
    raw_bytes: int
    wire_bytes: int
    duration: float
    round_count: int
    codec: str = "identity"

    CSV_COLUMNS = ("step", "path", "collective", "comm_size", "raw_bytes", "wire_bytes", "duration_s")

    def csv_row(self) -> tuple:
        return (self.step, self.path, self.collective, self.comm_size, self.raw_bytes, self.wire_bytes,
                repr(float(self.duration)))


@dataclass
class SimClock:
    """Per-rank elapsed simulated time plus the global event log."""

    world_size: int
    times: np.ndarray = field(init=False)
    events: list[TraceEvent] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.zeros(self.world_size, dtype=np.float64)

    def now(self, ranks) -> float:
        return float(self.times[list(ranks)].max())

    def advance(self, rank: int, seconds: float):
        if seconds < 0:
            raise ValueError("time cannot run backwards")
        self.times[rank] += seconds

    def synchronize(self, ranks, duration: float) -> float:
        """Participants start together at their latest clock and finish ``duration`` later."""
        ranks = list(ranks)
        end = self.now(ranks) + duration
        self.times[ranks] = end
        return end

    @property
    def elapsed(self) -> float:
        return float(self.times.max()) if self.world_size else 0.0


class Simulator:
    """Bundle of topology, clock and trace handed to the collectives."""

    def __init__(self, topology: Topology):
        self.topology = topology
        self.clock = SimClock(topology.world_size)
        self.step = 0
        self.recording = True

    @property
    def events(self) -> list[TraceEvent]:
        return self.clock.events

    def record(self, event: TraceEvent):
        if self.recording:
            self.clock.events.append(event)

    def compute(self, rank: int, flops: float):
        self.clock.advance(rank, flops / self.topology.compute_flops)
