"""A ring all-reduce on the simulated cluster.

Eight ranks sit on two nodes of four. A DP group that spans both nodes pays
for every hop over the slow link, so squeezing its bytes helps; a TP group
inside one node barely notices.
"""

from __future__ import annotations

import numpy as np

from hybridcomm.codec import CodecSpec
from hybridcomm.collectives import Communicator, allreduce
from hybridcomm.netsim import Simulator, preset

topo = preset("lassen-like")
rng = np.random.default_rng(1)
grads = [rng.standard_normal(1 << 18).astype(np.float32) * 1e-2 for _ in range(2)]

for label, ranks in (("across nodes", (0, 4)), ("inside a node", (0, 1))):
    print(label)
    exact = None
    for spec in (CodecSpec.identity(), CodecSpec.lossless(), CodecSpec.fixed_rate(16), CodecSpec.fixed_rate(8)):
        sim = Simulator(topo)
        out = allreduce(Communicator(ranks), grads, spec, sim, "DpAllReduce", average=True)[0]
        exact = out if exact is None else exact
        ev = sim.events[0]
        print(f"  {str(spec):>9}: {ev.duration * 1e6:8.1f} us, wire {ev.wire_bytes:>8} B of {ev.raw_bytes},"
              f" max err {np.max(np.abs(out - exact)):.1e}")
