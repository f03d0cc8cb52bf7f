import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from oracles import best_shift_exhaustive, masked_ncc_exhaustive
from rams.registration import (
    RegistrationError, ShiftVector, apply_shift, estimate_shift, masked_ncc_window,
)


def shifted_pair(rng, size, dy, dx, margin=8, sigma=2.0):
    big = gaussian_filter(rng.normal(size=(size + 2 * margin, size + 2 * margin)), sigma)
    big = np.round(3000 + 1000 * big / big.std()).astype(np.uint16)
    ref = big[margin:margin + size, margin:margin + size]
    mov = big[margin - dy:margin - dy + size, margin - dx:margin - dx + size]
    return ref, mov


def test_recovers_known_shift(rng):
    ref, mov = shifted_pair(rng, 40, 3, -2)
    ones = np.ones_like(ref, bool)
    assert estimate_shift(ref, mov, ones, ones, 5) == ShiftVector(3, -2)
    assert best_shift_exhaustive(ref, mov, ones, ones, 5) == (3, -2)


def test_identity(rng):
    ref, _ = shifted_pair(rng, 32, 0, 0)
    ones = np.ones_like(ref, bool)
    assert estimate_shift(ref, ref, ones, ones, 5) == ShiftVector(0, 0)


def test_half_masked_moving(rng):
    ref, mov = shifted_pair(rng, 40, 1, 1)
    ones = np.ones_like(ref, bool)
    mov_mask = ones.copy()
    mov_mask[:, 20:] = False
    mov = mov.copy()
    mov[:, 20:] = 60000  # garbage under the mask must not matter
    assert estimate_shift(ref, mov, ones, mov_mask, 5) == ShiftVector(1, 1)
    assert best_shift_exhaustive(ref, mov, ones, mov_mask, 5) == (1, 1)


def test_fourier_window_matches_spatial_oracle(rng):
    ref, mov = shifted_pair(rng, 24, -1, 2)
    m1 = rng.random(ref.shape) > 0.3
    m2 = rng.random(ref.shape) > 0.3
    fast = masked_ncc_window(ref, mov, m1, m2, 4)
    slow = masked_ncc_exhaustive(ref, mov, m1, m2, 4)
    np.testing.assert_allclose(fast, slow, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-3, 3), st.integers(-3, 3), st.floats(0.0, 0.4))
def test_agrees_with_exhaustive_search(seed, dy, dx, masked):
    rng = np.random.default_rng(seed)
    ref, mov = shifted_pair(rng, 20, dy, dx, sigma=1.5)
    m1 = rng.random(ref.shape) >= masked
    m2 = rng.random(ref.shape) >= masked
    got = estimate_shift(ref, mov, m1, m2, 3)
    assert tuple(got) == best_shift_exhaustive(ref, mov, m1, m2, 3)


def test_degenerate_inputs_fail():
    flat = np.full((16, 16), 500, np.uint16)
    ones = np.ones_like(flat, bool)
    with pytest.raises(RegistrationError):
        estimate_shift(flat, flat, ones, ones, 3)
    img = np.arange(256, dtype=np.uint16).reshape(16, 16)
    with pytest.raises(RegistrationError):
        estimate_shift(img, img, np.zeros_like(ones), ones, 3)


def test_apply_shift_zero_is_identity(rng):
    img = rng.integers(0, 1000, (6, 5)).astype(np.uint16)
    m = rng.random((6, 5)) > 0.5
    out, om = apply_shift(img, m, (0, 0))
    np.testing.assert_array_equal(out.pixels, img)
    np.testing.assert_array_equal(om.bits, m)


def test_apply_shift_marks_entering_border():
    img = np.arange(16, dtype=np.uint16).reshape(4, 4)
    out, om = apply_shift(img, np.ones((4, 4), bool), (0, 1))
    assert not om.bits[:, 0].any()
    assert om.bits[:, 1:].all()
    np.testing.assert_array_equal(out.pixels[:, 1:], img[:, :3])
    np.testing.assert_array_equal(out.pixels[:, 0], img[:, 1])  # reflect padding


def test_apply_shift_round_trip_interior(rng):
    img = rng.integers(0, 60000, (10, 7)).astype(np.uint16)
    m = np.ones((10, 7), bool)
    a, am = apply_shift(img, m, (2, 0))
    b, bm = apply_shift(a, am, (-2, 0))
    np.testing.assert_array_equal(b.pixels[:-2], img[:-2])
    assert bm.bits[:-2].all() and not bm.bits[-2:].any()


def test_apply_shift_registers_translation(rng):
    ref, mov = shifted_pair(rng, 30, 2, -3)
    ones = np.ones_like(ref, bool)
    s = estimate_shift(ref, mov, ones, ones, 5)
    out, om = apply_shift(mov, ones, -s)
    np.testing.assert_array_equal(out.pixels[om.bits], ref[om.bits])


def test_apply_shift_too_large():
    with pytest.raises(ValueError):
        apply_shift(np.zeros((4, 4), np.uint16), np.ones((4, 4), bool), (4, 0))
