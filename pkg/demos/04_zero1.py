"""ZeRO stage 1 changes who stores what, not what is computed.

Sharding Adam's moments over four DP ranks and exchanging gradients by
reduce-scatter gives the same parameters, bit for bit, as the plain all-reduce
path. The byte ledger shows where the traffic moved.
"""

from __future__ import annotations

import numpy as np

from hybridcomm import ToyModelConfig, Topology, build_layout, named_scheme
from hybridcomm.toymodel import ParallelTrainer, bytes_ledger

cfg = ToyModelConfig(num_blocks=2, input_dim=16, hidden_dim=32, output_dim=4, batch_size=32, steps=20)
layout = build_layout(4, 1, 1, Topology(num_nodes=1, gpus_per_node=4))

runs = {}
for mode in ("off", "reduce-scatter"):
    tr = ParallelTrainer(cfg, layout, named_scheme("baseline"), zero1=mode)
    for step in range(cfg.steps):
        tr.train_step(*tr.task.batch(step))
    runs[mode] = tr
    print(mode, bytes_ledger(tr.sim.events))

flat = {m: t.states[0].flat() for m, t in runs.items()}
print("identical parameters:", np.array_equal(flat["off"].view(np.uint32), flat["reduce-scatter"].view(np.uint32)))
print("moment entries per rank:", runs["off"].states[0].m.size, "->", runs["reduce-scatter"].states[0].zero1.m.size)
