"""A small 3D-parallel training harness driven through the simulated collectives.

The model is a residual MLP regressing a fixed random teacher::

    h_0 = x
    h_{i+1} = h_i + tanh(h_i @ W1_i + b1_i) @ W2_i + b2_i      (one block)
    out = h_L @ Wh + bh                                          (head)
    loss = mean((out - teacher(x)) ** 2)

Blocks are split across pipeline stages in order; the head lives on the last
stage. Inside a block W1/b1 are column-parallel and W2 row-parallel across the
TP group, so each block needs one TP all-reduce forward (partial outputs) and
one backward (input gradient). The head is column-parallel with an all-gather
of its outputs forward and an all-reduce of its input gradient backward.

The pipeline runs GPipe-style: every microbatch forward, then every
microbatch backward in reverse order. Per-microbatch gradients are summed in
ascending microbatch order, averaged over DP ranks, and applied with Adam.

All arithmetic is float32. The exact operation order below is what the
serial reference in the tests mirrors:

* forward:  ``z = x @ W1 + b1``; ``a = tanh(z)``; ``y = sum_t(a_t @ W2_t) + b2``; ``h = x + y``
* backward: ``da = dy @ W2.T``; ``dz = da * (1 - a * a)``; ``dx = sum_t(dz_t @ W1_t.T) + dy``
* output gradient: ``(out - y_true) * float32(2 / (rows * output_dim))`` with rows the DP-local batch
* Adam: see :func:`adam_update`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .codec import CodecError
from .collectives import allreduce, p2p, ring_allgather, ring_reduce_scatter
from .netsim import Simulator, TraceEvent
from .parallel3d import CommPath, ParallelLayout, SchemeTable, pad_to_multiple

ZERO1_MODES = ("off", "reduce-scatter", "allreduce")


class BadConfig(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ToyModelConfig:
    num_blocks: int = 4
    input_dim: int = 32
    hidden_dim: int = 64
    output_dim: int = 8
    batch_size: int = 32
    microbatches: int = 2
    steps: int = 100
    seed: int = 0
    learning_rate: float = 3e-3
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1.0e-8
    eval_size: int = 512

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        for name in ("num_blocks", "input_dim", "hidden_dim", "output_dim", "batch_size", "microbatches", "eval_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise BadConfig(name, f"must be a positive integer, got {value!r}")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 0:
            raise BadConfig("steps", f"must be a non-negative integer, got {self.steps!r}")
        if not self.learning_rate > 0:
            raise BadConfig("learning_rate", "must be > 0")
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise BadConfig("adam_betas", "must be two values in [0, 1)")

    def check_layout(self, dp: int, pp: int, tp: int):
        if self.hidden_dim % tp:
            raise BadConfig("hidden_dim", f"{self.hidden_dim} is not divisible by tp={tp}")
        if self.output_dim % tp:
            raise BadConfig("output_dim", f"{self.output_dim} is not divisible by tp={tp}")
        if self.num_blocks % pp:
            raise BadConfig("num_blocks", f"{self.num_blocks} is not divisible by pp={pp}")
        if self.batch_size % (dp * self.microbatches):
            raise BadConfig("batch_size", f"{self.batch_size} is not divisible by dp*microbatches={dp * self.microbatches}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


# --- task and parameters ----------------------------------------------------


@dataclass(frozen=True)
class Task:
    """Seeded teacher network and data stream.

    The teacher has the student's architecture with its own random weights,
    so the task is exactly learnable and codec noise shows up in the loss floor.
    """

    config: ToyModelConfig
    teacher: dict
    eval_x: np.ndarray
    eval_y: np.ndarray

    @classmethod
    def create(cls, config: ToyModelConfig) -> Task:
        teacher = init_params(config, np.random.default_rng([config.seed, 0]), out_scale=1.0)
        eval_x = np.random.default_rng([config.seed, 1]).standard_normal((config.eval_size, config.input_dim))
        eval_x = eval_x.astype(np.float32)
        return cls(config, teacher, eval_x, forward(teacher, eval_x))

    def targets(self, x: np.ndarray) -> np.ndarray:
        return forward(self.teacher, x)

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        x = np.random.default_rng([self.config.seed, 2, step]).standard_normal(
            (self.config.batch_size, self.config.input_dim)).astype(np.float32)
        return x, self.targets(x)


def init_params(config: ToyModelConfig, rng: np.random.Generator | None = None, out_scale: float = 0.5) -> dict:
    """Full, unsharded initial parameters: ``{"blocks": [...], "head": {...}}``."""
    rng = np.random.default_rng([config.seed, 3]) if rng is None else rng
    d, h, o = config.input_dim, config.hidden_dim, config.output_dim
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append({
            "W1": (rng.standard_normal((d, h)) / math.sqrt(d)).astype(np.float32),
            "b1": np.zeros(h, dtype=np.float32),
            "W2": (rng.standard_normal((h, d)) * (out_scale / math.sqrt(h))).astype(np.float32),
            "b2": np.zeros(d, dtype=np.float32),
        })
    head = {"W": (rng.standard_normal((d, o)) / math.sqrt(d)).astype(np.float32), "b": np.zeros(o, dtype=np.float32)}
    return {"blocks": blocks, "head": head}


def forward(params: dict, x: np.ndarray) -> np.ndarray:
    """Unsharded, uncompressed forward pass."""
    h = x
    for blk in params["blocks"]:
        a = np.tanh(h @ blk["W1"] + blk["b1"])
        h = h + (a @ blk["W2"] + blk["b2"])
    return h @ params["head"]["W"] + params["head"]["b"]


def forward_loss(params: dict, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((forward(params, x).astype(np.float64) - y) ** 2))


def adam_update(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, betas: tuple[float, float], eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One Adam step on flat float32 arrays; returns (params, m, v).

    ``step`` counts from 1. Element-wise only, so any slice of the inputs gives
    the same slice of the outputs bit for bit.
    """
    b1, b2 = np.float32(betas[0]), np.float32(betas[1])
    one = np.float32(1)
    m = b1 * m + (one - b1) * grads
    v = b2 * v + (one - b2) * (grads * grads)
    m_hat = m / np.float32(1 - betas[0] ** step)
    v_hat = v / np.float32(1 - betas[1] ** step)
    params = params - np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))
    return params, m, v


# --- per-rank state -----------------------------------------------------------


@dataclass
class Zero1State:
    """Adam moments for one rank's 1/dp shard of the (padded) flat parameter vector."""

    lo: int
    hi: int
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def for_rank(cls, position: int, dp: int, flat_len: int) -> Zero1State:
        padded = flat_len + (-flat_len) % dp
        k = padded // dp
        return cls(position * k, (position + 1) * k, np.zeros(k, np.float32), np.zeros(k, np.float32))


@dataclass
class RankState:
    """Parameters owned by one rank, in a fixed order, plus optimizer state."""

    names: list[str]
    params: dict[str, np.ndarray]
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    zero1: Zero1State | None = None

    def flat(self, source: dict[str, np.ndarray] | None = None) -> np.ndarray:
        source = self.params if source is None else source
        return np.concatenate([source[k].reshape(-1) for k in self.names])

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, off = {}, 0
        for k in self.names:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = flat[off:off + size].reshape(shape).copy()
            off += size
        return out

    @property
    def size(self) -> int:
        return sum(self.params[k].size for k in self.names)


def shard_params(full: dict, layout: ParallelLayout, rank: int) -> RankState:
    _, p, t = layout.coords(rank)
    nb = len(full["blocks"]) // layout.pp
    h = full["blocks"][0]["W1"].shape[1] // layout.tp
    params, names = {}, []
    for i in range(p * nb, (p + 1) * nb):
        blk = full["blocks"][i]
        local = {
            f"blocks.{i}.W1": blk["W1"][:, t * h:(t + 1) * h],
            f"blocks.{i}.b1": blk["b1"][t * h:(t + 1) * h],
            f"blocks.{i}.W2": blk["W2"][t * h:(t + 1) * h, :],
            f"blocks.{i}.b2": blk["b2"],
        }
        for k, val in local.items():
            params[k] = np.ascontiguousarray(val, dtype=np.float32).copy()
            names.append(k)
    if p == layout.pp - 1:
        o = full["head"]["W"].shape[1] // layout.tp
        params["head.W"] = np.ascontiguousarray(full["head"]["W"][:, t * o:(t + 1) * o]).copy()
        params["head.b"] = full["head"]["b"][t * o:(t + 1) * o].copy()
        names += ["head.W", "head.b"]
    return RankState(names, params)


def gather_params(states: list[RankState], layout: ParallelLayout, num_blocks: int) -> dict:
    """Reassemble full parameters from DP replica 0."""
    blocks = []
    for i in range(num_blocks):
        p = i // (num_blocks // layout.pp)
        parts = [states[layout.rank_of(0, p, t)].params for t in range(layout.tp)]
        blocks.append({
            "W1": np.concatenate([q[f"blocks.{i}.W1"] for q in parts], axis=1),
            "b1": np.concatenate([q[f"blocks.{i}.b1"] for q in parts]),
            "W2": np.concatenate([q[f"blocks.{i}.W2"] for q in parts], axis=0),
            "b2": parts[0][f"blocks.{i}.b2"].copy(),
        })
    last = [states[layout.rank_of(0, layout.pp - 1, t)].params for t in range(layout.tp)]
    head = {"W": np.concatenate([q["head.W"] for q in last], axis=1), "b": np.concatenate([q["head.b"] for q in last])}
    return {"blocks": blocks, "head": head}


# --- ZeRO stage 1 ---------------------------------------------------------------


def zero1_update(layout_group, grads: list[np.ndarray], states: list[Zero1State], params: list[np.ndarray],
                 step: int, lr: float, betas: tuple[float, float], eps: float, scheme: SchemeTable,
                 sim: Simulator | None = None, reduce_path: CommPath = CommPath.ZERO1_REDUCE_SCATTER
                 ) -> list[np.ndarray]:
    """Sharded Adam over one DP group.

    Gradients are reduce-scattered (or all-reduced when ``reduce_path`` is the
    DP all-reduce), averaged, applied to each rank's shard, and the updated
    shards all-gathered. Returns the new flat parameters per rank.
    """
    comm = layout_group
    dp = comm.size
    n = params[0].size
    padded_grads = [pad_to_multiple(g, dp) for g in grads]
    if reduce_path is CommPath.DP_ALLREDUCE:
        summed = allreduce(comm, padded_grads, scheme[reduce_path], sim, reduce_path, average=True)
        grad_shards = [summed[i][s.lo:s.hi] for i, s in enumerate(states)]
    else:
        shards = ring_reduce_scatter(comm, padded_grads, scheme[reduce_path], sim, reduce_path)
        grad_shards = [s / np.float32(dp) for s in shards]
    new_shards = []
    for i, st in enumerate(states):
        p_shard = pad_to_multiple(params[i], dp)[st.lo:st.hi]
        p_new, st.m, st.v = adam_update(p_shard, grad_shards[i], st.m, st.v, step, lr, betas, eps)
        new_shards.append(p_new)
    gathered = ring_allgather(comm, new_shards, scheme[CommPath.ZERO1_ALLGATHER], sim, CommPath.ZERO1_ALLGATHER)
    return [g[:n] for g in gathered]


# --- training driver --------------------------------------------------------------


@dataclass
class RunMetrics:
    scheme: str
    train_loss: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    simulated_seconds: float = 0.0
    samples_per_sec: float = 0.0
    bytes_by_path: dict[str, dict[str, int]] = field(default_factory=dict)
    diverged: bool = False
    diverged_reason: str = ""
    steps_completed: int = 0

    def summary(self) -> dict:
        return {
            "scheme": self.scheme,
            "final_loss": self.final_loss,
            "samples_per_sec": self.samples_per_sec,
            "simulated_seconds": self.simulated_seconds,
            "steps_completed": self.steps_completed,
            "diverged": self.diverged,
            "diverged_reason": self.diverged_reason,
            "bytes_by_path": self.bytes_by_path,
        }


class Diverged(RuntimeError):
    pass


class ParallelTrainer:
    """Owns every rank's state and one simulation clock."""

    def __init__(self, config: ToyModelConfig, layout: ParallelLayout, scheme: SchemeTable,
                 zero1: str = "off", task: Task | None = None):
        config.check_layout(layout.dp, layout.pp, layout.tp)
        if zero1 not in ZERO1_MODES:
            raise BadConfig("zero1", f"must be one of {ZERO1_MODES}, got {zero1!r}")
        self.config, self.layout, self.scheme, self.zero1 = config, layout, scheme, zero1
        self.task = task or Task.create(config)
        self.sim = Simulator(layout.topology)
        full = init_params(config)
        self.states = [shard_params(full, layout, r) for r in range(layout.world_size)]
        for r, st in enumerate(self.states):
            if zero1 == "off":
                st.m = np.zeros(st.size, np.float32)
                st.v = np.zeros(st.size, np.float32)
            else:
                st.zero1 = Zero1State.for_rank(layout.coords(r)[0], layout.dp, st.size)
        self.step_count = 0

    # flops of one microbatch on one rank; backward counts double
    def _block_flops(self, rows: int) -> float:
        c = self.config
        return 2 * rows * c.input_dim * (c.hidden_dim // self.layout.tp) * 2

    def _head_flops(self, rows: int) -> float:
        c = self.config
        return 2 * rows * c.input_dim * (c.output_dim // self.layout.tp)

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        """One optimizer step on a global batch; returns the mean training loss."""
        lay, cfg, sim = self.layout, self.config, self.sim
        sim.step = self.step_count
        m = cfg.microbatches
        rows = cfg.batch_size // lay.dp
        mb = rows // m
        nb = cfg.num_blocks // lay.pp
        o_local = cfg.output_dim // lay.tp
        grad_scale = np.float32(2.0 / (rows * cfg.output_dim))
        tp_ar = self.scheme[CommPath.TP_ALLREDUCE]
        pp_codec = self.scheme[CommPath.PP_P2P]

        stash = {}  # (d, p, j) -> per-block (inputs per t, activations per t), head input, output grad
        grads = {}  # (rank, j) -> {name: grad}
        sse = np.zeros((lay.dp, m), dtype=np.float64)

        for j in range(m):
            for p in range(lay.pp):
                for d in range(lay.dp):
                    ranks = [lay.rank_of(d, p, t) for t in range(lay.tp)]
                    comm = lay.tp_group(ranks[0])
                    if p == 0:
                        xs = x[d * rows + j * mb:d * rows + (j + 1) * mb]
                        hs = [xs.copy() for _ in ranks]
                    else:
                        hs = [p2p(lay.rank_of(d, p - 1, t), r, stash[(d, p - 1, j)]["out"][t], pp_codec, sim,
                                  CommPath.PP_P2P).reshape(mb, cfg.input_dim) for t, r in enumerate(ranks)]
                    blocks = []
                    for i in range(p * nb, (p + 1) * nb):
                        acts, partials = [], []
                        for t, r in enumerate(ranks):
                            P = self.states[r].params
                            a = np.tanh(hs[t] @ P[f"blocks.{i}.W1"] + P[f"blocks.{i}.b1"])
                            acts.append(a)
                            partials.append(a @ P[f"blocks.{i}.W2"])
                            sim.compute(r, self._block_flops(mb))
                        summed = allreduce(comm, partials, tp_ar, sim, CommPath.TP_ALLREDUCE)
                        blocks.append((hs, acts))
                        hs = [hs[t] + (summed[t].reshape(mb, -1) + self.states[r].params[f"blocks.{i}.b2"])
                              for t, r in enumerate(ranks)]
                    entry = {"blocks": blocks, "out": hs}
                    if p == lay.pp - 1:
                        outs = []
                        for t, r in enumerate(ranks):
                            P = self.states[r].params
                            outs.append(hs[t] @ P["head.W"] + P["head.b"])
                            sim.compute(r, self._head_flops(mb))
                        gathered = ring_allgather(comm, outs, self.scheme[CommPath.TP_ALLGATHER], sim,
                                                  CommPath.TP_ALLGATHER)
                        target = y[d * rows + j * mb:d * rows + (j + 1) * mb]
                        douts = []
                        for t in range(lay.tp):
                            full_out = np.concatenate(
                                [g.reshape(mb, o_local) for g in np.split(gathered[t], lay.tp)], axis=1)
                            diff = full_out - target
                            if t == 0:
                                sse[d, j] = np.sum(diff.astype(np.float64) ** 2)
                            douts.append(diff * grad_scale)
                        entry["douts"] = douts
                    stash[(d, p, j)] = entry

        if not np.all(np.isfinite(sse)):
            raise Diverged("non-finite training loss")

        for j in reversed(range(m)):
            for p in reversed(range(lay.pp)):
                for d in range(lay.dp):
                    ranks = [lay.rank_of(d, p, t) for t in range(lay.tp)]
                    comm = lay.tp_group(ranks[0])
                    entry = stash[(d, p, j)]
                    g = [dict() for _ in ranks]
                    if p == lay.pp - 1:
                        partials = []
                        for t, r in enumerate(ranks):
                            P = self.states[r].params
                            dout = entry["douts"][t][:, t * o_local:(t + 1) * o_local]
                            h_in = entry["out"][t]
                            g[t]["head.W"] = h_in.T @ dout
                            g[t]["head.b"] = dout.sum(axis=0)
                            partials.append(dout @ P["head.W"].T)
                            sim.compute(r, 2 * self._head_flops(mb))
                        summed = allreduce(comm, partials, tp_ar, sim, CommPath.TP_ALLREDUCE)
                        dh = [s.reshape(mb, cfg.input_dim) for s in summed]
                    else:
                        nxt = [stash[(d, p + 1, j)]["dx"][t] for t in range(lay.tp)]
                        dh = [p2p(lay.rank_of(d, p + 1, t), r, nxt[t], pp_codec, sim,
                                  CommPath.PP_P2P).reshape(mb, cfg.input_dim) for t, r in enumerate(ranks)]
                    for bi in reversed(range(nb)):
                        i = p * nb + bi
                        hs, acts = entry["blocks"][bi]
                        partials = []
                        for t, r in enumerate(ranks):
                            P = self.states[r].params
                            a, dy = acts[t], dh[t]
                            g[t][f"blocks.{i}.W2"] = a.T @ dy
                            g[t][f"blocks.{i}.b2"] = dy.sum(axis=0)
                            dz = (dy @ P[f"blocks.{i}.W2"].T) * (np.float32(1) - a * a)
                            g[t][f"blocks.{i}.W1"] = hs[t].T @ dz
                            g[t][f"blocks.{i}.b1"] = dz.sum(axis=0)
                            partials.append(dz @ P[f"blocks.{i}.W1"].T)
                            sim.compute(r, 2 * self._block_flops(mb))
                        summed = allreduce(comm, partials, tp_ar, sim, CommPath.TP_ALLREDUCE)
                        dh = [summed[t].reshape(mb, -1) + dh[t] for t in range(lay.tp)]
                    entry["dx"] = dh
                    for t, r in enumerate(ranks):
                        grads[(r, j)] = g[t]
            # free forward stash of this microbatch once every stage is done
            for key in [k for k in stash if k[2] == j]:
                stash[key].pop("blocks", None)

        flat_grads = {}
        for r, st in enumerate(self.states):
            total = grads[(r, 0)]
            for j in range(1, m):
                total = {k: total[k] + grads[(r, j)][k] for k in st.names}
            flat_grads[r] = st.flat(total)

        self._apply_gradients(flat_grads)
        self.step_count += 1
        return float(sse.sum() / (cfg.batch_size * cfg.output_dim))

    def _apply_gradients(self, grads):
        lay, cfg = self.layout, self.config
        step = self.step_count + 1
        betas, eps, lr = cfg.adam_betas, cfg.adam_eps, cfg.learning_rate
        for comm in lay.all_dp_groups():
            members = [self.states[r] for r in comm.ranks]
            flat_grads = [grads[r] for r in comm.ranks]
            if self.zero1 == "off":
                n = flat_grads[0].size
                padded = [pad_to_multiple(g_, comm.size) for g_ in flat_grads]
                avg = allreduce(comm, padded, self.scheme[CommPath.DP_ALLREDUCE], self.sim,
                                CommPath.DP_ALLREDUCE, average=True)
                for st, gsum in zip(members, avg):
                    flat, st.m, st.v = adam_update(st.flat(), gsum[:n], st.m, st.v, step, lr, betas, eps)
                    st.params = st.unflatten(flat)
            else:
                reduce_path = CommPath.DP_ALLREDUCE if self.zero1 == "allreduce" else CommPath.ZERO1_REDUCE_SCATTER
                new = zero1_update(comm, flat_grads, [st.zero1 for st in members], [st.flat() for st in members],
                                   step, lr, betas, eps, self.scheme, self.sim, reduce_path)
                for st, flat in zip(members, new):
                    st.params = st.unflatten(flat)

    def full_params(self) -> dict:
        return gather_params(self.states, self.layout, self.config.num_blocks)

    def eval_loss(self) -> float:
        return forward_loss(self.full_params(), self.task.eval_x, self.task.eval_y)


def run_experiment(config: ToyModelConfig, layout: ParallelLayout, scheme: SchemeTable,
                   zero1: str = "off") -> tuple[RunMetrics, list[TraceEvent]]:
    """Train for ``config.steps`` steps; returns metrics and the full event log."""
    trainer = ParallelTrainer(config, layout, scheme, zero1)
    metrics = RunMetrics(scheme=scheme.name)
    for step in range(config.steps):
        x, y = trainer.task.batch(step)
        try:
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported, not warned about
                loss = trainer.train_step(x, y)
        except (Diverged, CodecError) as exc:
            metrics.diverged, metrics.diverged_reason = True, str(exc)
            break
        if not math.isfinite(loss):
            metrics.diverged, metrics.diverged_reason = True, "non-finite training loss"
            break
        metrics.train_loss.append(loss)
    metrics.steps_completed = len(metrics.train_loss)
    metrics.final_loss = float("nan") if metrics.diverged else trainer.eval_loss()
    metrics.simulated_seconds = trainer.sim.clock.elapsed
    if metrics.simulated_seconds > 0:
        metrics.samples_per_sec = metrics.steps_completed * config.batch_size / metrics.simulated_seconds
    metrics.bytes_by_path = bytes_ledger(trainer.sim.events)
    return metrics, trainer.sim.events


def bytes_ledger(events: list[TraceEvent]) -> dict[str, dict[str, int]]:
    ledger: dict[str, dict[str, int]] = {}
    for ev in events:
        row = ledger.setdefault(ev.path, {"raw_bytes": 0, "wire_bytes": 0, "events": 0})
        row["raw_bytes"] += ev.raw_bytes
        row["wire_bytes"] += ev.wire_bytes
        row["events"] += 1
    return dict(sorted(ledger.items()))
