"""Binarized GEMM via XOR + popcount.

For ±1 vectors packed one bit per element, the inner product is
``n - 2 * popcount(a XOR b)``: XOR marks disagreeing positions, and each
disagreement swings the ±1 dot by -2. Zero padding is harmless because the
padding bits of both operands are zero, so their XOR contributes nothing.

Two kernels compute the same thing:

* ``bgemm_reference`` - full-width popcount accumulation, the oracle.
* ``bgemm_blocked``   - a lane-blocked kernel that accumulates per-byte
  popcounts in 8-bit lanes for a bounded number of inner iterations, widens
  them pairwise into 16-bit lanes, and only then folds into full-width
  outputs. This mirrors register-partitioned bitwise kernels on real
  hardware (inputs / XOR+CNT intermediates / narrow accumulators / widened
  results) while staying portable; the contract is bit-exactness, not
  instruction selection.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bitpack import WORD_BITS, BitTensor, pack_signs

NARROW_LANE_MAX = 255  # capacity of an 8-bit accumulator lane
BYTE_POPCOUNT_MAX = 8  # max popcount of one byte, i.e. per-iteration lane growth
WIDE_LANE_MAX = 65535


@dataclass(frozen=True)
class KernelBlocking:
    """Lane-blocking parameters for the accumulate-then-widen kernel.

    ``inner_unroll`` words are accumulated in 8-bit lanes before widening;
    the no-overflow invariant ``inner_unroll * 8 <= 255`` bounds it.
    """

    inner_unroll: int = 16
    narrow_lane_bits: int = 8
    wide_lane_bits: int = 16

    def __post_init__(self):
        if self.narrow_lane_bits != 8 or self.wide_lane_bits != 16:
            raise ValueError("only 8-bit narrow / 16-bit wide lanes are supported")
        if self.inner_unroll < 1:
            raise ValueError("inner_unroll must be >= 1")
        if self.inner_unroll * BYTE_POPCOUNT_MAX > NARROW_LANE_MAX:
            raise ValueError(
                f"inner_unroll={self.inner_unroll} can overflow an 8-bit lane: "
                f"{self.inner_unroll} * {BYTE_POPCOUNT_MAX} > {NARROW_LANE_MAX}"
            )


def xnor_popcount_dot(a_words: np.ndarray, b_words: np.ndarray, n: int) -> int:
    """±1 inner product of two packed rows of logical length ``n``."""
    a = np.atleast_1d(np.asarray(a_words, dtype=np.uint64))
    b = np.atleast_1d(np.asarray(b_words, dtype=np.uint64))
    if a.shape != b.shape:
        raise ValueError(f"packed row length mismatch: {a.shape} vs {b.shape}")
    if a.shape[-1] * WORD_BITS < n:
        raise ValueError("packed rows shorter than logical length")
    pc = int(np.bitwise_count(a ^ b).sum())
    return n - 2 * pc


def _check_operands(a: BitTensor, b: BitTensor) -> None:
    if a.logical_cols != b.logical_cols:
        raise ValueError(
            f"inner dimension mismatch: {a.logical_cols} vs {b.logical_cols}"
        )


def bgemm_reference(a: BitTensor, b: BitTensor) -> np.ndarray:
    """out[i, j] = ±1 dot of A row i with B row j (B stores the transposed
    right operand, so both operands stream row-major). Exact int64 result."""
    _check_operands(a, b)
    n = a.logical_cols
    out = np.empty((a.rows, b.rows), dtype=np.int64)
    # Chunk rows of A to bound the (rows_chunk, b.rows, words) intermediate.
    chunk = max(1, 1 << 22 >> max(1, b.rows * a.words_per_row).bit_length())
    for i0 in range(0, a.rows, chunk):
        xw = a.words[i0 : i0 + chunk, None, :] ^ b.words[None, :, :]
        pc = np.bitwise_count(xw).sum(axis=2, dtype=np.int64)
        out[i0 : i0 + chunk] = n - 2 * pc
    return out


def bgemm_blocked(
    a: BitTensor, b: BitTensor, blocking: KernelBlocking | None = None
) -> np.ndarray:
    """Lane-blocked BGEMM, bit-exact with :func:`bgemm_reference`.

    Per block of ``inner_unroll`` words: XOR, per-byte popcount into uint8
    lanes (narrow accumulation), pairwise widen into uint16 lanes. Widened
    lanes accumulate across blocks and fold into int64 at the end.
    """
    if blocking is None:
        blocking = KernelBlocking()
    _check_operands(a, b)
    n = a.logical_cols
    words = a.words_per_row
    # Each word adds at most 16 to one widened lane; guard uint16 capacity.
    if words * 2 * BYTE_POPCOUNT_MAX > WIDE_LANE_MAX:
        raise ValueError(f"logical length {n} exceeds 16-bit lane capacity")
    out = np.empty((a.rows, b.rows), dtype=np.int64)
    chunk = max(1, 1 << 21 >> max(1, b.rows * a.words_per_row).bit_length())
    unroll = blocking.inner_unroll
    for i0 in range(0, a.rows, chunk):
        aw = a.words[i0 : i0 + chunk]
        wide = np.zeros((aw.shape[0], b.rows, 4), dtype=np.uint16)
        for w0 in range(0, words, unroll):
            xw = aw[:, None, w0 : w0 + unroll] ^ b.words[None, :, w0 : w0 + unroll]
            lanes = np.bitwise_count(xw.view(np.uint8))
            lanes = lanes.reshape(aw.shape[0], b.rows, -1, 8)
            # Narrow accumulation: uint8 lanes, safe by the blocking invariant.
            narrow = lanes.sum(axis=2, dtype=np.uint8)
            # Widen adjacent byte lanes into uint16 (accumulate-long step).
            wide += narrow[..., 0::2].astype(np.uint16) + narrow[..., 1::2]
        pc = wide.sum(axis=2, dtype=np.int64)
        out[i0 : i0 + chunk] = n - 2 * pc
    return out


def assemble_scaled_output(
    raw: np.ndarray, alpha_w: np.ndarray, alpha_a2: float | None = None
) -> np.ndarray:
    """Scale a raw BGEMM result into the float output of a binarized unit.

    ``alpha_w`` scales per output channel (columns of ``raw``); for the
    second-scale term of a dual-scale unit, pass its activation scale as
    ``alpha_a2`` so the term is scaled exactly once.
    """
    raw = np.asarray(raw)
    alpha = np.asarray(alpha_w, dtype=np.float64)
    if alpha.ndim == 0:
        alpha = alpha[None]
    if alpha.shape[0] != raw.shape[-1]:
        raise ValueError(
            f"alpha_w length {alpha.shape[0]} != output channels {raw.shape[-1]}"
        )
    out = raw.astype(np.float64) * alpha
    if alpha_a2 is not None:
        out *= float(alpha_a2)
    return out


def _random_sign_matrix(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return np.where(rng.random((rows, cols)) < 0.5, -1.0, 1.0)


def _time_ns(fn, repeats: int) -> int:
    best = None
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    return int(best)


def _tiled(fn, a: BitTensor, b: BitTensor, threads: int) -> np.ndarray:
    """Run a kernel over independent row tiles of A and merge in tile order."""
    if threads <= 1 or a.rows < 2 * threads:
        return fn(a, b)
    bounds = np.linspace(0, a.rows, threads + 1, dtype=int)
    tiles = [
        BitTensor(int(hi - lo), a.logical_cols, a.words[lo:hi])
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda t: fn(t, b), tiles))
    return np.vstack(parts)


def bench_kernel(
    sizes: list[tuple[int, int, int]],
    repeats: int = 3,
    seed: int = 0,
    blocking: KernelBlocking | None = None,
    threads: int = 1,
) -> list[dict]:
    """Wall-time float GEMM vs the two bit kernels on random ±1 operands.

    Operands are generated and packed outside the timed region; the numbers
    are indicative (reported, never asserted as thresholds).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for m, n, k in sizes:
        if m < 1 or n < 1 or k < 1:
            raise ValueError(f"benchmark size must be positive, got {(m, n, k)}")
        af = _random_sign_matrix(rng, m, n)
        bf = _random_sign_matrix(rng, k, n)
        ap, bp = pack_signs(af), pack_signs(bf)
        float_ns = _time_ns(lambda: af @ bf.T, repeats)
        ref_ns = _time_ns(lambda: _tiled(bgemm_reference, ap, bp, threads), repeats)
        blocked_ns = _time_ns(
            lambda: _tiled(lambda x, y: bgemm_blocked(x, y, blocking), ap, bp, threads),
            repeats,
        )
        rows.append(
            {
                "size_m": m,
                "size_n": n,
                "size_k": k,
                "float_ns": float_ns,
                "ref_ns": ref_ns,
                "blocked_ns": blocked_ns,
                "speedup_blocked_vs_float": float_ns / blocked_ns,
            }
        )
    return rows


BENCH_CSV_HEADER = "size_m,size_n,size_k,float_ns,ref_ns,blocked_ns,speedup_blocked_vs_float"


def bench_report_csv(rows: list[dict]) -> str:
    lines = [BENCH_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r['size_m']},{r['size_n']},{r['size_k']},{r['float_ns']},"
            f"{r['ref_ns']},{r['blocked_ns']},{r['speedup_blocked_vs_float']:.6f}"
        )
    return "\n".join(lines) + "\n"
