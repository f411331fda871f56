import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binspot.bitpack import BitTensor, pack_signs, unpack_signs


def random_signs(rng, rows, cols):
    return np.where(rng.random((rows, cols)) < 0.5, -1.0, 1.0)


def test_all_plus_one_row_is_all_ones_word():
    t = pack_signs(np.ones((1, 64)))
    assert t.words.shape == (1, 1)
    assert t.words[0, 0] == np.uint64(0xFFFFFFFFFFFFFFFF)


def test_three_bit_row_encoding():
    t = pack_signs(np.array([[1.0, -1.0, 1.0]]))
    assert t.logical_cols == 3
    assert t.words[0, 0] == np.uint64(0b101)


def test_pack_rejects_non_sign_values():
    with pytest.raises(ValueError):
        pack_signs(np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        pack_signs(np.array([[1.0, 0.5]]))
    with pytest.raises(ValueError):
        pack_signs(np.array([[1.0, np.nan]]))


def test_unpack_all_minus_one():
    s = -np.ones((1, 64))
    assert np.array_equal(unpack_signs(pack_signs(s)), s)


def test_unpack_low_bits_pattern():
    t = BitTensor(rows=1, logical_cols=4, words=np.array([[0b0101]], dtype=np.uint64))
    assert np.array_equal(unpack_signs(t), [[1.0, -1.0, 1.0, -1.0]])


def test_round_trip_7x130():
    rng = np.random.default_rng(42)
    s = random_signs(rng, 7, 130)
    assert np.array_equal(unpack_signs(pack_signs(s)), s)


def test_round_trip_16x100():
    rng = np.random.default_rng(3)
    s = random_signs(rng, 16, 100)
    assert np.array_equal(unpack_signs(pack_signs(s)), s)


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(1, 9),
    cols=st.integers(1, 200),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_identity_property(rows, cols, seed):
    s = random_signs(np.random.default_rng(seed), rows, cols)
    t = pack_signs(s)
    assert np.array_equal(unpack_signs(t), s)


@settings(max_examples=60, deadline=None)
@given(
    rows=st.integers(1, 9),
    cols=st.integers(1, 200),
    seed=st.integers(0, 2**32 - 1),
)
def test_padding_bits_always_zero(rows, cols, seed):
    s = random_signs(np.random.default_rng(seed), rows, cols)
    t = pack_signs(s)
    assert t.padding_clean()
    # explicit mask check mirroring the invariant definition
    mask = ~t.tail_mask()
    assert np.all(t.words[:, -1] & mask == 0)
