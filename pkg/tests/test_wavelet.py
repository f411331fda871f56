import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binspot.wavelet import (
    WaveletPyramid,
    freq_distill_loss,
    freq_distill_loss_and_grads,
    haar_dwt2,
    haar_idwt2,
    relative_energy,
    split_frequency,
)


def rand_map(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


class TestTransform:
    def test_constant_input_has_no_detail(self):
        c = 3.7
        p = haar_dwt2(np.full((4, 4), c))
        np.testing.assert_allclose(p.ll, 2 * c)  # orthonormal scaling: 2x per level
        assert np.all(p.lh == 0) and np.all(p.hl == 0) and np.all(p.hh == 0)

    def test_impulse_preserves_unit_energy(self):
        x = np.zeros((6, 6))
        x[3, 2] = 1.0
        p = haar_dwt2(x)
        total = sum(np.sum(s**2) for s in (p.ll, p.lh, p.hl, p.hh))
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_rejects_degenerate_dims(self):
        with pytest.raises(ValueError):
            haar_dwt2(np.zeros((1, 8)))

    def test_round_trip_8x8(self):
        r = rand_map(0, (8, 8))
        np.testing.assert_allclose(haar_idwt2(haar_dwt2(r)), r, atol=1e-6)

    def test_round_trip_odd_dims_padded(self):
        r = rand_map(1, (7, 9))
        p = haar_dwt2(r)
        assert p.ll.shape == (4, 5)
        np.testing.assert_allclose(haar_idwt2(p), r, atol=1e-12)

    def test_zero_pyramid_reconstructs_zero(self):
        z = np.zeros((3, 3))
        p = WaveletPyramid(z, z, z, z, orig_dims=(6, 6))
        assert np.all(haar_idwt2(p) == 0)

    def test_dwt_idwt_fixed_point_on_pyramid(self):
        r = rand_map(2, (10, 12))
        p = haar_dwt2(r)
        p2 = haar_dwt2(haar_idwt2(p))
        for name in ("ll", "lh", "hl", "hh"):
            np.testing.assert_allclose(getattr(p2, name), getattr(p, name), atol=1e-12)

    def test_batched_leading_axes(self):
        r = rand_map(3, (5, 2, 8, 6))
        np.testing.assert_allclose(haar_idwt2(haar_dwt2(r)), r, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        h=st.integers(1, 12).map(lambda k: 2 * k),
        w=st.integers(1, 12).map(lambda k: 2 * k),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_parseval_property(self, h, w, seed):
        r = rand_map(seed, (h, w))
        p = haar_dwt2(r)
        subband = sum(np.sum(s**2) for s in (p.ll, p.lh, p.hl, p.hh))
        assert subband == pytest.approx(np.sum(r**2), rel=1e-9, abs=1e-6)


class TestEnergy:
    def test_constant_is_pure_low(self):
        en = relative_energy(haar_dwt2(np.full((8, 8), 2.0)))
        assert en.p_high == 0.0 and en.p_low == 1.0

    def test_checkerboard_is_pure_high(self):
        x = np.indices((8, 8)).sum(axis=0) % 2
        en = relative_energy(haar_dwt2(np.where(x == 0, 1.0, -1.0)))
        assert en.p_high == 1.0 and en.p_low == 0.0

    def test_all_zero_input_convention(self):
        en = relative_energy(haar_dwt2(np.zeros((4, 4))))
        assert en.p_high == 0.0 and en.p_low == 0.0

    def test_matches_brute_force_ratio(self):
        r = rand_map(4, (16, 10))
        p = haar_dwt2(r)
        e_low = float(np.sum(p.ll**2))
        e_high = float(np.sum(p.lh**2) + np.sum(p.hl**2) + np.sum(p.hh**2))
        en = relative_energy(p)
        assert en.p_high == pytest.approx(e_high / (e_high + e_low))
        assert en.p_low + en.p_high == pytest.approx(1.0)


class TestSplit:
    def test_constant_is_all_low(self):
        r = np.full((6, 6), 1.3)
        hi, lo = split_frequency(r)
        np.testing.assert_allclose(hi, 0, atol=1e-12)
        np.testing.assert_allclose(lo, r, atol=1e-12)

    def test_checkerboard_is_all_high(self):
        x = np.indices((8, 8)).sum(axis=0) % 2
        r = np.where(x == 0, 1.0, -1.0)
        hi, lo = split_frequency(r)
        np.testing.assert_allclose(lo, 0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(
        h=st.integers(1, 10).map(lambda k: 2 * k),
        w=st.integers(1, 10).map(lambda k: 2 * k),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_additivity_property(self, h, w, seed):
        r = rand_map(seed, (h, w))
        hi, lo = split_frequency(r)
        np.testing.assert_allclose(hi + lo, r, atol=1e-6)

    def test_projections_are_orthogonal(self):
        r = rand_map(5, (8, 8))
        hi, lo = split_frequency(r)
        assert abs(np.sum(hi * lo)) < 1e-9


def brute_force_distill_loss(student, teacher):
    """Straight-line reimplementation of the normalized squared-map distance."""
    total = 0.0
    for idx in student:
        s, t = student[idx], teacher[idx]
        batch = s.shape[0]
        acc = 0.0
        for b in range(batch):
            for comp in (0, 1):
                sc = split_frequency(s[b])[comp].ravel() ** 2
                tc = split_frequency(t[b])[comp].ravel() ** 2
                sn = sc / np.linalg.norm(sc) if np.linalg.norm(sc) > 0 else sc * 0
                tn = tc / np.linalg.norm(tc) if np.linalg.norm(tc) > 0 else tc * 0
                acc += np.linalg.norm(sn - tn)
        total += acc / batch
    return total


class TestDistillLoss:
    def test_identical_traces_zero_loss(self):
        reps = {1: rand_map(0, (3, 8, 8)), 2: rand_map(1, (3, 8, 8))}
        assert freq_distill_loss(reps, reps) == 0.0

    def test_negated_teacher_zero_loss(self):
        s = {1: rand_map(2, (2, 6, 6))}
        t = {1: -s[1]}
        assert freq_distill_loss(s, t) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force(self):
        s = {1: rand_map(3, (4, 8, 6)), 3: rand_map(4, (4, 8, 6))}
        t = {1: rand_map(5, (4, 8, 6)), 3: rand_map(6, (4, 8, 6))}
        assert freq_distill_loss(s, t) == pytest.approx(
            brute_force_distill_loss(s, t), rel=1e-12
        )

    def test_missing_teacher_block_rejected(self):
        s = {1: rand_map(7, (2, 4, 4)), 2: rand_map(8, (2, 4, 4))}
        with pytest.raises(ValueError):
            freq_distill_loss(s, {1: s[1]})

    def test_shape_misalignment_rejected(self):
        with pytest.raises(ValueError):
            freq_distill_loss({1: rand_map(9, (2, 4, 4))}, {1: rand_map(9, (2, 6, 4))})

    def test_zero_norm_student_map_is_other_sides_norm(self):
        s = {1: np.zeros((1, 4, 4))}
        t = {1: rand_map(10, (1, 4, 4))}
        # both components of the student normalize to zero vectors; each pair
        # contributes the unit norm of the teacher's normalized map
        assert freq_distill_loss(s, t) == pytest.approx(2.0)


class TestDistillBackward:
    def test_zero_gradient_at_minimum(self):
        reps = {1: rand_map(11, (2, 6, 6))}
        loss, grads = freq_distill_loss_and_grads(reps, reps)
        assert loss == 0.0
        assert np.all(grads[1] == 0)

    def test_gradient_matches_finite_differences_4x4(self):
        s = {1: rand_map(12, (1, 4, 4))}
        t = {1: rand_map(13, (1, 4, 4))}
        loss, grads = freq_distill_loss_and_grads(s, t)
        g = grads[1]
        h = 1e-6
        fd = np.zeros_like(s[1])
        for i in range(4):
            for j in range(4):
                sp = {1: s[1].copy()}
                sp[1][0, i, j] += h
                sm = {1: s[1].copy()}
                sm[1][0, i, j] -= h
                fd[0, i, j] = (
                    freq_distill_loss(sp, t) - freq_distill_loss(sm, t)
                ) / (2 * h)
        err = np.abs(g - fd) / np.maximum(1e-8, np.abs(g) + np.abs(fd))
        assert err.max() < 1e-4

    def test_teacher_receives_no_gradient(self):
        # gradients are returned only for student maps, keyed by block
        s = {2: rand_map(14, (2, 4, 4))}
        t = {2: rand_map(15, (2, 4, 4))}
        _, grads = freq_distill_loss_and_grads(s, t)
        assert set(grads) == {2}
        assert grads[2].shape == s[2].shape
