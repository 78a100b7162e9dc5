"""Gradient compression: stochastic uniform quantization (QSGD) and Top-k.

Wire layout of a quantized gradient (little-endian header)::

    [dim: u32][levels: u16][norm: f32][payload]

The payload holds one fixed-width record per coordinate in canonical weight
order: a sign bit followed by the level index as an unsigned ``b``-bit
integer, ``b = floor(log2(levels)) + 1``. Records are concatenated MSB-first
and the last byte is zero-padded. Only the norm header and the records count
toward the transmitted size; ``dim`` and ``levels`` are framing.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

NORM_HEADER_BITS = 32
DENSE_VALUE_BITS = 32
DENSE_HEADER_BITS = 32
MAX_LEVELS = 0xFFFF
_HEADER = struct.Struct("<IHf")


class FormatError(ValueError):
    pass


def bit_width(levels: int) -> int:
    """Quantization bits for ``levels``: floor(log2 s) + 1."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    return int(levels).bit_length()


@dataclass(frozen=True)
class QuantizedGradient:
    norm: float
    levels: int
    indices: np.ndarray  # level index per coordinate, in [0, levels]
    negative: np.ndarray  # sign bit per coordinate

    @property
    def dim(self) -> int:
        return len(self.indices)

    @property
    def bit_width(self) -> int:
        return bit_width(self.levels)

    @property
    def record_bits(self) -> int:
        return self.bit_width + 1


def _as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("expected a flat vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    return v


def qsgd_encode(v, levels: int, rng: np.random.Generator) -> QuantizedGradient:
    levels = int(levels)
    if levels < 1 or levels > MAX_LEVELS:
        raise ValueError(f"levels must be in [1, {MAX_LEVELS}], got {levels}")
    v = _as_vector(v)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        zeros = np.zeros(len(v), dtype=np.uint32)
        return QuantizedGradient(0.0, levels, zeros, np.zeros(len(v), dtype=bool))
    ratio = np.minimum(np.abs(v) / norm * levels, levels)
    lower = np.floor(ratio)
    # the upper endpoint is taken with probability equal to the offset into the bin
    up = rng.random(len(v)) < (ratio - lower)
    idx = (lower + up).astype(np.uint32)
    negative = (v < 0) & (idx > 0)
    return QuantizedGradient(float(np.float32(norm)), levels, idx, negative)


def qsgd_decode(q: QuantizedGradient) -> np.ndarray:
    if len(q.negative) != q.dim:
        raise FormatError("sign and index arrays differ in length")
    if q.dim and int(q.indices.max()) > q.levels:
        raise FormatError(f"level index exceeds levels={q.levels}")
    mag = q.norm * (q.indices.astype(np.float64) / q.levels)
    return np.where(q.negative, -mag, mag)


def encoded_size_bits(q: QuantizedGradient) -> int:
    return q.dim * q.record_bits + NORM_HEADER_BITS


def qsgd_size_bits(dim: int, levels: int) -> int:
    return dim * (bit_width(levels) + 1) + NORM_HEADER_BITS


def dense_size_bits(dim: int) -> int:
    return dim * DENSE_VALUE_BITS + DENSE_HEADER_BITS


def pack_records(q: QuantizedGradient) -> tuple[bytes, int]:
    """Pack the per-coordinate records; returns (bytes, number of bits written)."""
    b = q.bit_width
    codes = (q.negative.astype(np.uint64) << np.uint64(b)) | q.indices.astype(np.uint64)
    shifts = np.arange(b, -1, -1, dtype=np.uint64)
    bits = ((codes[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).ravel()
    return np.packbits(bits).tobytes(), int(bits.size)


def unpack_records(data: bytes, dim: int, levels: int) -> tuple[np.ndarray, np.ndarray]:
    b = bit_width(levels)
    nbits = dim * (b + 1)
    if len(data) * 8 < nbits:
        raise FormatError(
            f"payload truncated: need {nbits} bits ({math.ceil(nbits / 8)} bytes), got {len(data)} bytes"
        )
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[:nbits].reshape(dim, b + 1)
    weights = np.uint64(1) << np.arange(b - 1, -1, -1, dtype=np.uint64)
    idx = (bits[:, 1:].astype(np.uint64) * weights).sum(axis=1).astype(np.uint32)
    return idx, bits[:, 0].astype(bool)


def serialize(q: QuantizedGradient) -> bytes:
    payload, _ = pack_records(q)
    return _HEADER.pack(q.dim, q.levels, q.norm) + payload


def deserialize(data: bytes) -> QuantizedGradient:
    if len(data) < _HEADER.size:
        raise FormatError(f"message shorter than the {_HEADER.size}-byte header")
    dim, levels, norm = _HEADER.unpack_from(data)
    if levels < 1:
        raise FormatError(f"bad levels field {levels} at byte offset 4")
    idx, negative = unpack_records(data[_HEADER.size :], dim, levels)
    if int(idx.max(initial=0)) > levels:
        raise FormatError(f"level index exceeds levels={levels}")
    return QuantizedGradient(float(norm), levels, idx, negative)


@dataclass(frozen=True)
class SparseGradient:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def k_kept(self) -> int:
        return len(self.indices)


def topk_encode(v, fraction: float) -> SparseGradient:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    v = _as_vector(v)
    # rounding guards against 0.1 * n landing a hair above an integer
    k = math.ceil(round(fraction * len(v), 9))
    # stable sort on -|v| keeps the lower index first among ties
    keep = np.sort(np.argsort(-np.abs(v), kind="stable")[:k])
    return SparseGradient(keep.astype(np.int64), v[keep].copy(), len(v))


def topk_decode(sg: SparseGradient) -> np.ndarray:
    if len(sg.indices) != len(sg.values):
        raise FormatError("indices and values differ in length")
    if sg.k_kept and (sg.indices.max() >= sg.dim or sg.indices.min() < 0):
        raise FormatError(f"index out of range for dim {sg.dim}")
    out = np.zeros(sg.dim)
    out[sg.indices] = sg.values
    return out


def topk_size_bits(sg: SparseGradient) -> int:
    index_bits = max(1, math.ceil(math.log2(sg.dim))) if sg.dim > 1 else 1
    return sg.k_kept * (DENSE_VALUE_BITS + index_bits)
