"""Where to compress: the throughput/loss trade-off across schemes.

A residual MLP is trained on a 2x2x2 layout. Compressing everything at a low
rate is fastest; routing model-parallel traffic through the lossless coder or
a higher rate keeps most of that speed. At this size loss gaps are small and
move with the seed, so the loss column is a three-seed mean (about two
minutes on one core).
"""

from __future__ import annotations

from dataclasses import replace

from hybridcomm import ToyModelConfig, build_layout, named_scheme, preset, run_experiment

SCHEMES = ("baseline", "naive-mpc", "naive-zfp16", "naive-zfp8", "mz-hybrid-8", "z-hybrid-24-8", "z-hybrid-16-8")

layout = build_layout(2, 2, 2, preset("lassen-like"))

# throughput needs realistic message sizes; a few steps suffice
big = ToyModelConfig(num_blocks=4, input_dim=256, hidden_dim=1024, output_dim=64, batch_size=256, steps=3)
# loss needs many steps; a small model keeps that quick
small = ToyModelConfig(num_blocks=2, input_dim=16, hidden_dim=32, output_dim=4, batch_size=32, steps=500,
                       learning_rate=0.01)
SEEDS = (0, 1, 2)

base_sps = None
print(f"{'scheme':>15} {'samples/s':>11} {'vs base':>8} {'final loss':>11}")
for name in SCHEMES:
    scheme = named_scheme(name)
    sps = run_experiment(big, layout, scheme)[0].samples_per_sec
    base_sps = base_sps or sps
    loss = sum(run_experiment(replace(small, seed=s), layout, scheme)[0].final_loss for s in SEEDS) / len(SEEDS)
    print(f"{scheme.name:>15} {sps:11.1f} {100 * (sps / base_sps - 1):+7.1f}% {loss:11.5f}")
