"""Two codecs, two kinds of data.

Gradients in data parallelism are mostly tiny and often zero; activations in
model parallelism are dense. The lossless coder only wins on the first kind,
while the fixed-rate quantiser trades a known error for a known size.
"""

from __future__ import annotations

import numpy as np

from hybridcomm.codec import CodecSpec, block_exponents, compress, decompress, error_bound

rng = np.random.default_rng(0)
n = 1 << 16

sparse = np.zeros(n, dtype=np.float32)
hot = rng.random(n) < 0.05
sparse[hot] = rng.standard_normal(hot.sum()).astype(np.float32) * 1e-3
dense = rng.standard_normal(n).astype(np.float32)

print(f"{'data':>7} {'codec':>10} {'ratio':>7} {'max err':>10} {'bound':>10}")
for label, buf in (("sparse", sparse), ("dense", dense)):
    for spec in (CodecSpec.lossless(), CodecSpec.fixed_rate(8), CodecSpec.fixed_rate(16), CodecSpec.fixed_rate(24)):
        c = compress(spec, buf)
        out = decompress(c)
        err = float(np.max(np.abs(out.astype(np.float64) - buf)))
        bound = float(error_bound(spec.rate_bits, block_exponents(buf)).max()) if spec.is_lossy else 0.0
        print(f"{label:>7} {str(spec):>10} {buf.nbytes / c.wire_bytes:7.2f} {err:10.2e} {bound:10.2e}")

# Each fixed-rate block costs one exponent byte plus rate*64 bits, whatever the data.
print("\nfixed:8 on 1024 values ->", compress(CodecSpec.fixed_rate(8), dense[:1024]).wire_bytes, "bytes")
