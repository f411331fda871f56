"""One-level 2D Haar analysis/synthesis and frequency-split distillation.

The four subband filters are the rows of the (symmetric, orthogonal)
scaled Hadamard matrix H4/2, applied to each 2x2 cell: with cell entries
a=x[2i,2j], b=x[2i,2j+1], c=x[2i+1,2j], d=x[2i+1,2j+1],

    ll = (a+b+c+d)/2     lh = (a+b-c-d)/2
    hl = (a-b+c-d)/2     hh = (a-b-c+d)/2

Orthonormality buys two things used throughout: Parseval (subband energy
equals input energy) and a self-inverse transform (the synthesis is the
same butterfly). "High frequency" means the three detail subbands
{lh, hl, hh} jointly; ll is the low-frequency component.

Odd spatial dims are zero-padded to even for analysis and cropped back on
synthesis. All functions accept arbitrary leading (batch/channel) axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class WaveletPyramid:
    """One-level decomposition; each subband has shape (..., ceil(H/2), ceil(W/2))."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    orig_dims: tuple[int, int]


@dataclass(frozen=True)
class FrequencyEnergies:
    e_high: float
    e_low: float
    p_high: float
    p_low: float


def _pad_even(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 == 0 and w % 2 == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, h % 2), (0, w % 2)]
    return np.pad(x, pad)


def haar_dwt2(r: np.ndarray) -> WaveletPyramid:
    """Orthonormal one-level 2D Haar decomposition of (..., H, W) maps."""
    r = np.asarray(r, dtype=np.float64)
    h, w = r.shape[-2], r.shape[-1]
    if h < 2 or w < 2:
        raise ValueError(f"spatial dims must be >= 2, got {(h, w)}")
    x = _pad_even(r)
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    return WaveletPyramid(
        ll=(a + b + c + d) / 2,
        lh=(a + b - c - d) / 2,
        hl=(a - b + c - d) / 2,
        hh=(a - b - c + d) / 2,
        orig_dims=(h, w),
    )


def haar_idwt2(p: WaveletPyramid) -> np.ndarray:
    """Perfect reconstruction, cropped to the original dims."""
    ll, lh, hl, hh = p.ll, p.lh, p.hl, p.hh
    sh = list(ll.shape)
    out = np.empty(sh[:-2] + [2 * sh[-2], 2 * sh[-1]], dtype=np.float64)
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    h, w = p.orig_dims
    return out[..., :h, :w]


def relative_energy(p: WaveletPyramid) -> FrequencyEnergies:
    """Share of energy in the detail subbands vs the ll subband.

    An all-zero input yields p_high = p_low = 0 by convention.
    """
    e_low = float(np.sum(p.ll**2))
    e_high = float(np.sum(p.lh**2) + np.sum(p.hl**2) + np.sum(p.hh**2))
    total = e_high + e_low
    if total == 0.0:
        return FrequencyEnergies(e_high=0.0, e_low=0.0, p_high=0.0, p_low=0.0)
    return FrequencyEnergies(
        e_high=e_high, e_low=e_low, p_high=e_high / total, p_low=e_low / total
    )


def split_frequency(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decompose R into (R_high, R_low) with R_high + R_low == R.

    Each component is the synthesis of one subband group alone; both are
    orthogonal projections of R, so the split is also self-adjoint (used by
    the distillation backward).
    """
    p = haar_dwt2(r)
    zero = np.zeros_like(p.ll)
    r_low = haar_idwt2(WaveletPyramid(p.ll, zero, zero, zero, p.orig_dims))
    r_high = haar_idwt2(WaveletPyramid(zero, p.lh, p.hl, p.hh, p.orig_dims))
    return r_high, r_low


def _normalized_squared_map(component: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample L2-normalized flattened squared map and its norms.

    Zero-norm maps normalize to the zero vector (no division blowup).
    """
    batch = component.shape[0]
    v = (component**2).reshape(batch, -1)
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return v / safe[:, None], norms


def _pair_loss_and_grad(
    student: np.ndarray, teacher: np.ndarray
) -> tuple[float, np.ndarray]:
    """Distance between normalized squared maps of one frequency component.

    Inputs are (B, H, W) component maps; returns the batch-mean loss and its
    gradient w.r.t. the student component map.
    """
    b = student.shape[0]
    u, nv = _normalized_squared_map(student)
    u_hat, _ = _normalized_squared_map(teacher)
    diff = u - u_hat
    dist = np.linalg.norm(diff, axis=1)
    loss = float(np.mean(dist))
    # dL/du per sample: diff / dist (zero at the minimum), then through the
    # normalization Jacobian (I - u uᵀ)/||v|| and the elementwise square.
    safe_dist = np.where(dist > 0, dist, 1.0)
    g_u = diff / safe_dist[:, None] / b
    g_u[dist == 0] = 0.0
    safe_nv = np.where(nv > 0, nv, 1.0)
    g_v = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / safe_nv[:, None]
    g_v[nv == 0] = 0.0
    g_comp = 2.0 * student * g_v.reshape(student.shape)
    return loss, g_comp


def freq_distill_loss_and_grads(
    student_reps: dict[int, np.ndarray],
    teacher_reps: dict[int, np.ndarray],
) -> tuple[float, dict[int, np.ndarray]]:
    """Frequency-split distillation over uniformly mapped blocks.

    ``student_reps`` holds the (B, H, W) representation of every executed
    student block, keyed by block index; the teacher dict must contain the
    same keys. High and low components are squared, per-sample normalized,
    and matched separately; block losses accumulate by sum, samples by mean.

    Returns the loss and, per block, its gradient w.r.t. the student map
    (teacher maps receive no gradient). The high/low projections are
    self-adjoint, so each component gradient maps back through its own
    projection.
    """
    missing = set(student_reps) - set(teacher_reps)
    if missing:
        raise ValueError(f"teacher trace missing blocks {sorted(missing)}")
    total = 0.0
    grads: dict[int, np.ndarray] = {}
    for idx in sorted(student_reps):
        r_s = np.asarray(student_reps[idx], dtype=np.float64)
        r_t = np.asarray(teacher_reps[idx], dtype=np.float64)
        if r_s.shape != r_t.shape:
            raise ValueError(
                f"trace misalignment at block {idx}: {r_s.shape} vs {r_t.shape}"
            )
        s_high, s_low = split_frequency(r_s)
        t_high, t_low = split_frequency(r_t)
        loss_h, g_h = _pair_loss_and_grad(s_high, t_high)
        loss_l, g_l = _pair_loss_and_grad(s_low, t_low)
        total += loss_h + loss_l
        gh_proj, _ = split_frequency(g_h)
        _, gl_proj = split_frequency(g_l)
        grads[idx] = gh_proj + gl_proj
    return total, grads


def freq_distill_loss(
    student_reps: dict[int, np.ndarray],
    teacher_reps: dict[int, np.ndarray],
) -> float:
    loss, _ = freq_distill_loss_and_grads(student_reps, teacher_reps)
    return loss
