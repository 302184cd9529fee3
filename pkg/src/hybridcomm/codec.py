"""Float32 buffer codecs: identity, a lossless XOR predictor, and a fixed-rate quantizer.

The lossless codec plays the role of MPC and the fixed-rate codec the role of
ZFP in fixed-rate mode. Neither is bitstream compatible with those libraries;
they reproduce the properties the schemes rely on (exact round trip for the
lossless path, a hard bits-per-value budget and error bound for the lossy one).

Wire layout of a :class:`CompressedBuffer` (all integers little-endian)::

    offset  size  field
    0       4     magic b"HCC1"
    4       1     codec kind (0 identity, 1 lossless, 2 fixed-rate)
    5       1     rate_bits (0 unless fixed-rate)
    6       8     original_len, number of float32 values (uint64)
    14      4     block count (fixed-rate) / chunk count (lossless) / 0 (uint32)
    18      ...   payload

Identity payload: the raw float32 values, little-endian.

Lossless payload: a fallback bitmap of ceil(chunks / 8) bytes (bit i, MSB
first, set when chunk i is stored raw), then one MSB-first bitstream holding
every chunk back to back, zero padded to a byte boundary. A raw chunk is its
values' 32-bit patterns. A coded chunk stores, per value, the XOR residual
against the previous value's bit pattern (the first value of each chunk is
XORed with 0): ``0`` for a zero residual, otherwise ``1``, the 5-bit count of
leading zero bits, and the bits below the leading one.

Fixed-rate payload: per block of 64 values (last block zero padded) one byte
holding the biased IEEE exponent of the block's largest magnitude, followed by
64 two's-complement integers of ``rate_bits`` bits each, MSB first.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"HCC1"
HEADER = struct.Struct("<4sBBQI")
HEADER_BYTES = HEADER.size

BLOCK_SIZE = 64
CHUNK_SIZE = 4096
MIN_RATE = 2
MAX_RATE = 32

# longest lossless code: flag + 5-bit count + 31 bits under the leading one
_MAX_CODE_BITS = 37


class CodecError(ValueError):
    """Base class for codec failures."""


class NonFiniteInput(CodecError):
    """A NaN or infinity was routed through the lossy codec."""


class CorruptPayload(CodecError):
    """A compressed buffer does not decode."""


class DataDependentSize(CodecError):
    """The wire size cannot be known without compressing the data."""


class CodecKind(enum.IntEnum):
    IDENTITY = 0
    LOSSLESS = 1
    FIXED_RATE = 2


@dataclass(frozen=True)
class CodecSpec:
    """Which codec a message goes through, and at what rate."""

    kind: CodecKind
    rate_bits: int | None = None

    def __post_init__(self):
        if self.kind == CodecKind.FIXED_RATE:
            if not isinstance(self.rate_bits, (int, np.integer)) or not MIN_RATE <= self.rate_bits <= MAX_RATE:
                raise ValueError(f"rate_bits must be an integer in [{MIN_RATE}, {MAX_RATE}], got {self.rate_bits!r}")
            object.__setattr__(self, "rate_bits", int(self.rate_bits))
        elif self.rate_bits is not None:
            raise ValueError(f"rate_bits is only meaningful for fixed-rate, got {self.rate_bits!r}")

    @classmethod
    def identity(cls) -> CodecSpec:
        return cls(CodecKind.IDENTITY)

    @classmethod
    def lossless(cls) -> CodecSpec:
        return cls(CodecKind.LOSSLESS)

    @classmethod
    def fixed_rate(cls, rate_bits: int) -> CodecSpec:
        return cls(CodecKind.FIXED_RATE, rate_bits)

    @property
    def is_lossy(self) -> bool:
        return self.kind == CodecKind.FIXED_RATE

    def __str__(self) -> str:
        if self.kind == CodecKind.FIXED_RATE:
            return f"fixed:{self.rate_bits}"
        return "identity" if self.kind == CodecKind.IDENTITY else "lossless"

    @classmethod
    def parse(cls, text: str) -> CodecSpec:
        """Inverse of ``str()``: ``identity``, ``lossless`` or ``fixed:<bits>``."""
        t = text.strip().lower()
        if t in ("identity", "none"):
            return cls.identity()
        if t in ("lossless", "mpc"):
            return cls.lossless()
        head, sep, rate = t.partition(":")
        if head in ("fixed", "zfp") and sep:
            try:
                return cls.fixed_rate(int(rate))
            except ValueError as exc:
                raise ValueError(f"bad codec rate in {text!r}: {exc}") from None
        raise ValueError(f"unknown codec {text!r}; expected identity, lossless or fixed:<bits>")


@dataclass(frozen=True)
class CompressedBuffer:
    codec: CodecSpec
    original_len: int
    payload: bytes
    block_count: int = 0
    fallback_flags: tuple[bool, ...] = field(default=(), compare=False)

    @property
    def wire_bytes(self) -> int:
        """Bytes a collective puts on the link (payload only, frame header excluded)."""
        return len(self.payload)

    def to_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, int(self.codec.kind), self.codec.rate_bits or 0, self.original_len, self.block_count)
        return head + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> CompressedBuffer:
        if len(data) < HEADER_BYTES:
            raise CorruptPayload(f"buffer of {len(data)} bytes is shorter than the {HEADER_BYTES}-byte header")
        magic, kind, rate, n, count = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptPayload(f"bad magic {magic!r}")
        try:
            kind = CodecKind(kind)
            spec = CodecSpec(kind, rate if kind == CodecKind.FIXED_RATE else None)
        except ValueError as exc:
            raise CorruptPayload(str(exc)) from None
        if kind != CodecKind.FIXED_RATE and rate != 0:
            raise CorruptPayload(f"rate_bits={rate} on a {kind.name.lower()} buffer")
        payload = bytes(data[HEADER_BYTES:])
        flags: tuple[bool, ...] = ()
        if kind == CodecKind.LOSSLESS:
            nbitmap = (count + 7) // 8
            if len(payload) < nbitmap:
                raise CorruptPayload("truncated fallback bitmap")
            bits = np.unpackbits(np.frombuffer(payload[:nbitmap], dtype=np.uint8))[:count]
            flags = tuple(bool(b) for b in bits)
        return cls(spec, n, payload, count, flags)


def as_float_buffer(values) -> np.ndarray:
    """Coerce to a flat, contiguous float32 array (the unit of all communication)."""
    return np.ascontiguousarray(np.asarray(values, dtype=np.float32).reshape(-1))


def float_bits(values) -> np.ndarray:
    return as_float_buffer(values).view(np.uint32)


def wire_size_bytes(spec: CodecSpec, n: int) -> int:
    """Exact payload size the codec emits for ``n`` values."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if spec.kind == CodecKind.IDENTITY:
        return 4 * n
    if spec.kind == CodecKind.FIXED_RATE:
        return math.ceil(n / BLOCK_SIZE) * (1 + math.ceil(spec.rate_bits * BLOCK_SIZE / 8))
    raise DataDependentSize("lossless size depends on the data; compress and read wire_bytes instead")


def compress(spec: CodecSpec, buf) -> CompressedBuffer:
    values = as_float_buffer(buf)
    if spec.kind == CodecKind.IDENTITY:
        return CompressedBuffer(spec, values.size, values.astype("<f4").tobytes())
    if spec.kind == CodecKind.LOSSLESS:
        return _lossless_compress(spec, values)
    return _fixed_rate_compress(spec, values)


def decompress(cbuf: CompressedBuffer) -> np.ndarray:
    n = cbuf.original_len
    kind = cbuf.codec.kind
    if kind == CodecKind.IDENTITY:
        if len(cbuf.payload) != 4 * n:
            raise CorruptPayload(f"identity payload is {len(cbuf.payload)} bytes, expected {4 * n}")
        return np.frombuffer(cbuf.payload, dtype="<f4").astype(np.float32)
    if kind == CodecKind.LOSSLESS:
        return _lossless_decompress(cbuf)
    return _fixed_rate_decompress(cbuf)


def roundtrip(spec: CodecSpec, buf) -> tuple[np.ndarray, int]:
    """What a receiver sees after one compressed hop, and the wire bytes it cost."""
    if spec.kind == CodecKind.IDENTITY:
        values = as_float_buffer(buf)
        return values.copy(), 4 * values.size
    cbuf = compress(spec, buf)
    return decompress(cbuf), cbuf.wire_bytes


# --- fixed-rate -------------------------------------------------------------


def block_exponents(values) -> np.ndarray:
    """Unbiased exponent E of each 64-value block's largest magnitude (|v| < 2**(E+1))."""
    values = as_float_buffer(values)
    nblocks = math.ceil(values.size / BLOCK_SIZE)
    padded = np.zeros(nblocks * BLOCK_SIZE, dtype=np.uint32)
    padded[: values.size] = values.view(np.uint32) & 0x7FFFFFFF
    # for non-negative floats the bit pattern orders like the magnitude
    biased = (padded.reshape(nblocks, BLOCK_SIZE).max(axis=1) >> 23).astype(np.int64)
    return np.maximum(biased, 1) - 127


def error_bound(rate_bits: int, exponents) -> np.ndarray:
    """Per-block worst-case absolute error, 2**(E - rate + 2)."""
    return np.ldexp(1.0, np.asarray(exponents, dtype=np.int64) - rate_bits + 2)


def _fixed_rate_compress(spec: CodecSpec, values: np.ndarray) -> CompressedBuffer:
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput(f"{int(np.count_nonzero(~np.isfinite(values)))} non-finite values on a lossy path")
    rate = spec.rate_bits
    n = values.size
    nblocks = math.ceil(n / BLOCK_SIZE)
    if nblocks == 0:
        return CompressedBuffer(spec, 0, b"", 0)
    exps = block_exponents(values)
    padded = np.zeros(nblocks * BLOCK_SIZE, dtype=np.float64)
    padded[:n] = values
    blocks = padded.reshape(nblocks, BLOCK_SIZE)
    # power-of-two scaling is exact in float64; rint rounds half to even
    q = np.rint(np.ldexp(blocks, (rate - 2 - exps)[:, None])).astype(np.int64)
    np.clip(q, -(1 << (rate - 1)), (1 << (rate - 1)) - 1, out=q)

    unsigned = (q & ((1 << rate) - 1)).astype(np.uint64)
    shifts = np.arange(rate - 1, -1, -1, dtype=np.uint64)
    bits = ((unsigned[:, :, None] >> shifts) & np.uint64(1)).astype(np.uint8)
    packed = np.packbits(bits.reshape(nblocks, BLOCK_SIZE * rate), axis=1)
    out = np.empty((nblocks, 1 + packed.shape[1]), dtype=np.uint8)
    out[:, 0] = exps + 127
    out[:, 1:] = packed
    return CompressedBuffer(spec, n, out.tobytes(), nblocks)


def _fixed_rate_decompress(cbuf: CompressedBuffer) -> np.ndarray:
    rate = cbuf.codec.rate_bits
    n = cbuf.original_len
    nblocks = math.ceil(n / BLOCK_SIZE)
    if cbuf.block_count != nblocks:
        raise CorruptPayload(f"block count {cbuf.block_count} does not cover {n} values (expected {nblocks})")
    stride = 1 + BLOCK_SIZE * rate // 8
    if len(cbuf.payload) != nblocks * stride:
        raise CorruptPayload(f"fixed-rate payload is {len(cbuf.payload)} bytes, expected {nblocks * stride}")
    if nblocks == 0:
        return np.zeros(0, dtype=np.float32)
    raw = np.frombuffer(cbuf.payload, dtype=np.uint8).reshape(nblocks, stride)
    biased = raw[:, 0].astype(np.int64)
    if np.any((biased < 1) | (biased > 254)):
        raise CorruptPayload("block exponent byte out of range")
    bits = np.unpackbits(raw[:, 1:], axis=1).reshape(nblocks, BLOCK_SIZE, rate).astype(np.int64)
    weights = np.left_shift(1, np.arange(rate - 1, -1, -1, dtype=np.int64))
    q = bits @ weights
    q -= (q >> (rate - 1)) << rate  # sign extension
    values = np.ldexp(q.astype(np.float64), (biased - 127 - rate + 2)[:, None])
    # every reconstructed value is exactly representable in float32
    return values.reshape(-1)[:n].astype(np.float32)


# --- lossless ---------------------------------------------------------------


def _chunk_codes(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Code words and their bit lengths for one chunk of bit patterns."""
    prev = np.empty_like(u)
    prev[0] = 0
    prev[1:] = u[:-1]
    r = (u ^ prev).astype(np.uint64)
    bitlen = np.frexp(r.astype(np.float64))[1].astype(np.int64)  # 0 for r == 0
    nz = r != 0
    below = np.maximum(bitlen - 1, 0).astype(np.uint64)
    lz = (32 - bitlen).astype(np.uint64)
    low = r & ((np.uint64(1) << below) - np.uint64(1))
    codes = np.where(nz, (np.uint64(1) << (below + np.uint64(5))) | (lz << below) | low, np.uint64(0))
    lengths = np.where(nz, 6 + bitlen - 1, 1)
    return codes, lengths


def _expand_codes(codes: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    shifts = lengths[:, None] - 1 - np.arange(_MAX_CODE_BITS)[None, :]
    valid = shifts >= 0
    bits = (codes[:, None] >> np.maximum(shifts, 0).astype(np.uint64)) & np.uint64(1)
    return bits[valid].astype(np.uint8)


def _raw_bits(u: np.ndarray) -> np.ndarray:
    return np.unpackbits(u.astype(">u4").view(np.uint8))


def _lossless_compress(spec: CodecSpec, values: np.ndarray) -> CompressedBuffer:
    u = values.view(np.uint32)
    n = u.size
    nchunks = math.ceil(n / CHUNK_SIZE)
    flags = []
    pieces = []
    for c in range(nchunks):
        chunk = u[c * CHUNK_SIZE : (c + 1) * CHUNK_SIZE]
        codes, lengths = _chunk_codes(chunk)
        if int(lengths.sum()) >= 32 * chunk.size:
            flags.append(True)
            pieces.append(_raw_bits(chunk))
        else:
            flags.append(False)
            pieces.append(_expand_codes(codes, lengths))
    bitmap = np.packbits(np.array(flags, dtype=np.uint8)).tobytes()
    stream = np.packbits(np.concatenate(pieces)).tobytes() if pieces else b""
    return CompressedBuffer(spec, n, bitmap + stream, nchunks, tuple(flags))


def _decode_chunk(bits: np.ndarray, off: int, k: int) -> tuple[np.ndarray, int]:
    window = bits[off : off + _MAX_CODE_BITS * k].astype(np.int64)
    m = window.size
    padded = np.zeros(m + _MAX_CODE_BITS, dtype=np.int64)
    padded[:m] = window
    lz = padded[1 : m + 1] * 16 + padded[2 : m + 2] * 8 + padded[3 : m + 3] * 4 + padded[4 : m + 4] * 2 + padded[5 : m + 5]
    step = np.where(window == 1, 37 - lz, 1).tolist()

    starts = [0] * k
    pos = 0
    try:
        for i in range(k):
            starts[i] = pos
            pos += step[pos]
    except IndexError:
        raise CorruptPayload("lossless bitstream ends inside a chunk") from None
    if pos > m:
        raise CorruptPayload("lossless bitstream ends inside a chunk")

    s = np.asarray(starts, dtype=np.int64)
    nz = window[s] == 1
    below = 31 - lz[s]
    tail = padded[(s + 6)[:, None] + np.arange(31)]
    low = (tail @ np.left_shift(1, np.arange(30, -1, -1, dtype=np.int64))) >> (31 - below)
    r = np.where(nz, (np.int64(1) << below) | low, 0).astype(np.uint32)
    return np.bitwise_xor.accumulate(r), off + pos


def _lossless_decompress(cbuf: CompressedBuffer) -> np.ndarray:
    n = cbuf.original_len
    nchunks = math.ceil(n / CHUNK_SIZE)
    if cbuf.block_count != nchunks:
        raise CorruptPayload(f"chunk count {cbuf.block_count} does not cover {n} values (expected {nchunks})")
    nbitmap = (nchunks + 7) // 8
    if len(cbuf.payload) < nbitmap:
        raise CorruptPayload("truncated fallback bitmap")
    raw = np.frombuffer(cbuf.payload, dtype=np.uint8)
    flags = np.unpackbits(raw[:nbitmap])[:nchunks]
    bits = np.unpackbits(raw[nbitmap:])
    out = np.empty(n, dtype=np.uint32)
    off = 0
    for c in range(nchunks):
        lo, hi = c * CHUNK_SIZE, min((c + 1) * CHUNK_SIZE, n)
        k = hi - lo
        if flags[c]:
            if off + 32 * k > bits.size:
                raise CorruptPayload("lossless bitstream ends inside a raw chunk")
            out[lo:hi] = np.packbits(bits[off : off + 32 * k]).view(">u4")
            off += 32 * k
        else:
            out[lo:hi], off = _decode_chunk(bits, off, k)
    if bits.size - off >= 8:
        raise CorruptPayload(f"{bits.size - off} trailing bits after the last chunk")
    return out.view(np.float32)
