"""Rank placement for DP x PP x TP and the per-path codec tables.

Ranks are laid out TP-innermost, then PP, then DP::

    rank = d * (pp * tp) + p * tp + t

so a TP group is a run of consecutive ranks and stays on one node whenever
``tp <= gpus_per_node``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecKind, CodecSpec
from .collectives import Communicator
from .netsim import Topology

DEFAULT_HIGH_RATE = 16
DEFAULT_LOW_RATE = 8


class BadLayout(ValueError):
    pass


class InvalidScheme(ValueError):
    pass


class CommPath(enum.Enum):
    DP_ALLREDUCE = "DpAllReduce"
    PP_P2P = "PpP2p"
    TP_ALLREDUCE = "TpAllReduce"
    TP_ALLGATHER = "TpAllGather"
    ZERO1_ALLGATHER = "Zero1AllGather"
    ZERO1_REDUCE_SCATTER = "Zero1ReduceScatter"

    @property
    def parallelism(self) -> str:
        return _TABLE_ROWS[self][0]

    @property
    def collective(self) -> str:
        return _TABLE_ROWS[self][1]


# row labels as printed in the scheme tables
_TABLE_ROWS = {
    CommPath.DP_ALLREDUCE: ("DP", "All-reduce"),
    CommPath.PP_P2P: ("PP", "Point-to-point"),
    CommPath.TP_ALLREDUCE: ("TP", "All-reduce"),
    CommPath.TP_ALLGATHER: ("TP", "All-gather"),
    CommPath.ZERO1_ALLGATHER: ("ZeRO stage 1", "All-gather"),
    CommPath.ZERO1_REDUCE_SCATTER: ("ZeRO stage 1", "Reduce-Scatter"),
}

MODEL_PARALLEL_PATHS = (
    CommPath.PP_P2P,
    CommPath.TP_ALLREDUCE,
    CommPath.TP_ALLGATHER,
    CommPath.ZERO1_ALLGATHER,
    CommPath.ZERO1_REDUCE_SCATTER,
)


@dataclass(frozen=True)
class ParallelLayout:
    dp: int
    pp: int
    tp: int
    topology: Topology

    @property
    def world_size(self) -> int:
        return self.dp * self.pp * self.tp

    def rank_of(self, d: int, p: int, t: int) -> int:
        return d * (self.pp * self.tp) + p * self.tp + t

    def coords(self, rank: int) -> tuple[int, int, int]:
        """(d, p, t) of a rank."""
        if not 0 <= rank < self.world_size:
            raise ValueError(f"rank {rank} outside [0, {self.world_size})")
        d, rest = divmod(rank, self.pp * self.tp)
        p, t = divmod(rest, self.tp)
        return d, p, t

    def dp_group(self, rank: int) -> Communicator:
        _, p, t = self.coords(rank)
        return Communicator(tuple(self.rank_of(d, p, t) for d in range(self.dp)))

    def tp_group(self, rank: int) -> Communicator:
        d, p, _ = self.coords(rank)
        return Communicator(tuple(self.rank_of(d, p, t) for t in range(self.tp)))

    def pp_chain(self, rank: int) -> tuple[int, ...]:
        d, _, t = self.coords(rank)
        return tuple(self.rank_of(d, p, t) for p in range(self.pp))

    def pp_neighbors(self, rank: int) -> tuple[int | None, int | None]:
        """(previous stage, next stage) ranks, ``None`` at the ends of the pipeline."""
        d, p, t = self.coords(rank)
        prev = self.rank_of(d, p - 1, t) if p > 0 else None
        nxt = self.rank_of(d, p + 1, t) if p < self.pp - 1 else None
        return prev, nxt

    def all_dp_groups(self) -> list[Communicator]:
        return [self.dp_group(self.rank_of(0, p, t)) for p in range(self.pp) for t in range(self.tp)]

    def all_tp_groups(self) -> list[Communicator]:
        return [self.tp_group(self.rank_of(d, p, 0)) for d in range(self.dp) for p in range(self.pp)]

    def all_pp_chains(self) -> list[tuple[int, ...]]:
        return [self.pp_chain(self.rank_of(d, 0, t)) for d in range(self.dp) for t in range(self.tp)]


def build_layout(dp: int, pp: int, tp: int, topology: Topology) -> ParallelLayout:
    for name, deg in (("dp", dp), ("pp", pp), ("tp", tp)):
        if not isinstance(deg, (int, np.integer)) or deg < 1:
            raise BadLayout(f"{name} must be a positive integer, got {deg!r}")
    if dp * pp * tp != topology.world_size:
        raise BadLayout(f"dp*pp*tp = {dp}*{pp}*{tp} = {dp * pp * tp} does not match world size {topology.world_size}")
    return ParallelLayout(int(dp), int(pp), int(tp), topology)


@dataclass(frozen=True)
class SchemeTable:
    name: str
    codecs: dict = field(compare=True)

    def __post_init__(self):
        missing = [p.value for p in CommPath if p not in self.codecs]
        if missing:
            raise InvalidScheme(f"scheme {self.name!r} has no codec for {', '.join(missing)}")

    def __getitem__(self, path: CommPath) -> CodecSpec:
        return self.codecs[path]

    def __hash__(self):
        return hash((self.name, tuple(str(self.codecs[p]) for p in CommPath)))

    def to_dict(self) -> dict:
        return {"name": self.name, "paths": {p.value: str(self.codecs[p]) for p in CommPath}}

    @classmethod
    def from_dict(cls, data: dict) -> SchemeTable:
        paths = data.get("paths", {})
        unknown = set(paths) - {p.value for p in CommPath}
        if unknown:
            raise InvalidScheme(f"unknown communication paths {sorted(unknown)}")
        return cls(data.get("name", "custom"), {CommPath(k): CodecSpec.parse(v) for k, v in paths.items()})

    def rows(self) -> list[tuple[str, str, str]]:
        """(parallelism, collective, scheme label) in table order."""
        lossy_rates = sorted({c.rate_bits for c in self.codecs.values() if c.is_lossy})
        out = []
        for path in CommPath:
            out.append((path.parallelism, path.collective, _label(self.codecs[path], lossy_rates)))
        return out


def _label(spec: CodecSpec, lossy_rates: list[int]) -> str:
    if spec.kind == CodecKind.IDENTITY:
        return "None"
    if spec.kind == CodecKind.LOSSLESS:
        return "MPC"
    if len(lossy_rates) < 2:
        return "ZFP"
    return "low-rate ZFP" if spec.rate_bits == lossy_rates[0] else "high-rate ZFP"


def scheme_no_compression() -> SchemeTable:
    return SchemeTable("no-compression", {p: CodecSpec.identity() for p in CommPath})


def scheme_naive(spec: CodecSpec) -> SchemeTable:
    """The same codec on every path."""
    names = {CodecKind.IDENTITY: "no-compression", CodecKind.LOSSLESS: "naive-mpc"}
    name = names.get(spec.kind) or f"naive-zfp{spec.rate_bits}"
    return SchemeTable(name, {p: spec for p in CommPath})


def scheme_mz_hybrid(dp_rate: int = DEFAULT_LOW_RATE) -> SchemeTable:
    """Lossless on every model-parallel and ZeRO path, fixed-rate on the DP all-reduce."""
    codecs = {p: CodecSpec.lossless() for p in MODEL_PARALLEL_PATHS}
    codecs[CommPath.DP_ALLREDUCE] = CodecSpec.fixed_rate(dp_rate)
    return SchemeTable(f"mz-hybrid-{dp_rate}", codecs)


def scheme_z_hybrid(mp_rate: int = DEFAULT_HIGH_RATE, dp_rate: int = DEFAULT_LOW_RATE) -> SchemeTable:
    """High-rate fixed-rate on model-parallel and ZeRO paths, low rate on the DP all-reduce."""
    if mp_rate < dp_rate:
        raise InvalidScheme(f"model-parallel rate {mp_rate} must be >= data-parallel rate {dp_rate}")
    codecs = {p: CodecSpec.fixed_rate(mp_rate) for p in MODEL_PARALLEL_PATHS}
    codecs[CommPath.DP_ALLREDUCE] = CodecSpec.fixed_rate(dp_rate)
    return SchemeTable(f"z-hybrid-{mp_rate}-{dp_rate}", codecs)


def named_scheme(name: str) -> SchemeTable:
    """Look up a scheme by its short name.

    Accepted: ``baseline`` / ``no-compression``, ``naive-mpc``, ``naive-zfp<r>``,
    ``mz-hybrid-<dp>``, ``z-hybrid-<mp>-<dp>`` (underscores work too).
    """
    key = name.strip().lower().replace("_", "-")
    try:
        if key in ("baseline", "no-compression", "none"):
            return scheme_no_compression()
        if key == "naive-mpc":
            return scheme_naive(CodecSpec.lossless())
        if key.startswith("naive-zfp"):
            return scheme_naive(CodecSpec.fixed_rate(int(key[len("naive-zfp"):])))
        if key.startswith("mz-hybrid"):
            rest = key[len("mz-hybrid"):].strip("-")
            return scheme_mz_hybrid(int(rest) if rest else DEFAULT_LOW_RATE)
        if key.startswith("z-hybrid"):
            rates = [int(r) for r in key[len("z-hybrid"):].strip("-").split("-") if r]
            return scheme_z_hybrid(*rates)
    except (ValueError, TypeError) as exc:
        raise InvalidScheme(f"bad scheme name {name!r}: {exc}") from None
    raise InvalidScheme(f"unknown scheme {name!r}")


def pad_to_multiple(values: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad a flat buffer so its length divides evenly by ``multiple``."""
    extra = (-values.size) % multiple
    if extra == 0:
        return values
    return np.concatenate([values, np.zeros(extra, dtype=values.dtype)])
