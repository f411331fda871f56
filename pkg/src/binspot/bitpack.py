"""Bit-packed storage for ±1 matrices.

A sign matrix is packed row-major into 64-bit words, one bit per element:
bit 1 encodes +1 and bit 0 encodes -1. Bits beyond ``logical_cols`` in each
row's final word are kept zero so that XOR of two packed rows never produces
stray set bits in the padding region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64


def as_float_array(x) -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting NaN/Inf."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor contains NaN or Inf")
    return a


@dataclass(frozen=True)
class BitTensor:
    """Packed ±1 matrix: ``words[i]`` holds row i, LSB-first within each word."""

    rows: int
    logical_cols: int
    words: np.ndarray  # uint64, shape (rows, ceil(logical_cols / 64))

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    def tail_mask(self) -> np.uint64:
        """Mask of the valid bits in each row's final word."""
        used = self.logical_cols % WORD_BITS
        if used == 0:
            return np.uint64(0xFFFFFFFFFFFFFFFF)
        return np.uint64((1 << used) - 1)

    def padding_clean(self) -> bool:
        """True iff all padding bits beyond logical_cols are zero."""
        if self.words.size == 0:
            return True
        tail = self.words[:, -1]
        return bool(np.all(tail & ~self.tail_mask() == 0))


def pack_signs(signs) -> BitTensor:
    """Pack a ±1 matrix into a BitTensor.

    Every element must be exactly +1.0 or -1.0; anything else is rejected.
    1-D input is treated as a single row.
    """
    s = as_float_array(signs)
    if s.ndim == 1:
        s = s[None, :]
    if s.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D sign matrix, got ndim={s.ndim}")
    if not np.all(np.abs(s) == 1.0):
        raise ValueError("pack_signs requires every element to be exactly +1 or -1")
    rows, cols = s.shape
    bits = (s > 0).astype(np.uint8)
    pad = (-cols) % WORD_BITS
    if pad:
        bits = np.pad(bits, ((0, 0), (0, pad)))
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = np.ascontiguousarray(packed).view("<u8").astype(np.uint64)
    return BitTensor(rows=rows, logical_cols=cols, words=words)


def unpack_signs(t: BitTensor) -> np.ndarray:
    """Expand a BitTensor back to its ±1 float matrix."""
    raw = t.words.astype("<u8").view(np.uint8).reshape(t.rows, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, : t.logical_cols]
    return np.where(bits == 1, 1.0, -1.0)
