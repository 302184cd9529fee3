"""Simulated 3D-parallel training with per-path compression of collective traffic."""

from __future__ import annotations

from .codec import (
    CodecError,
    CodecKind,
    CodecSpec,
    CompressedBuffer,
    CorruptPayload,
    DataDependentSize,
    NonFiniteInput,
    compress,
    decompress,
    error_bound,
    roundtrip,
    wire_size_bytes,
)
from .collectives import BadChunking, Communicator, allreduce, p2p, ring_allgather, ring_reduce_scatter
from .config import ConfigError, ExperimentConfig, load_config
from .netsim import PRESETS, LinkClass, Simulator, Topology, TraceEvent, preset
from .parallel3d import (
    BadLayout,
    CommPath,
    InvalidScheme,
    ParallelLayout,
    SchemeTable,
    build_layout,
    named_scheme,
    scheme_mz_hybrid,
    scheme_naive,
    scheme_no_compression,
    scheme_z_hybrid,
)
from .toymodel import ParallelTrainer, RunMetrics, Task, ToyModelConfig, run_experiment

__version__ = "0.1.0"
