import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cpsnr_scalar, cssim_reference
from rams.metrics import (
    EvalRecord, UndefinedMetric, aggregate, clear_mse, cmse, cpsnr, cssim, evaluate_pair, psnr_from_mse,
    read_records, write_records,
)


def _pair(rng, size=16, lo=1000, hi=50000):
    hr = rng.integers(lo, hi, (size, size)).astype(np.uint16)
    sr = rng.integers(lo, hi, (size, size)).astype(np.uint16)
    return sr, hr


def test_clear_mse_examples():
    a = np.ones((2, 2))
    assert clear_mse(a, a, a) == 0
    assert clear_mse(a + 2, a, a) == 4
    with pytest.raises(UndefinedMetric):
        clear_mse(a, a, np.zeros((2, 2)))


def test_offset_gives_sentinel(rng):
    hr = rng.integers(100, 60000, (20, 20)).astype(np.uint16)
    assert cpsnr(hr.astype(np.int64) - 7, hr) == math.inf
    assert cssim(hr, hr) == pytest.approx(1.0, abs=1e-12)


def test_zero_db():
    assert psnr_from_mse(65535.0**2) == 0.0


def test_random_pair_matches_oracle(rng):
    sr, hr = _pair(rng, 20)
    mask = rng.random((20, 20)) > 0.2
    assert cpsnr(sr, hr, mask) == pytest.approx(cpsnr_scalar(sr, hr, mask), rel=1e-9)
    assert abs(cssim(sr, hr, mask) - cssim_reference(sr, hr, mask)) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_oracle_property(seed, masked):
    rng = np.random.default_rng(seed)
    base = rng.integers(5000, 40000, (18, 18))
    sr = (base + rng.normal(0, 500, base.shape)).clip(0, 65535).astype(np.uint16)
    hr = base.astype(np.uint16)
    mask = rng.random(hr.shape) >= masked
    assert cpsnr(sr, hr, mask) == pytest.approx(cpsnr_scalar(sr, hr, mask), rel=1e-9)
    assert abs(cssim(sr, hr, mask) - cssim_reference(sr, hr, mask)) <= 1e-6


def test_cssim_symmetric_at_best_candidate(rng):
    from skimage.metrics import structural_similarity

    sr, hr = _pair(rng, 20)
    hr = hr.astype(float)
    sr_b = sr + (hr - sr).mean()  # d=0 leaves one candidate, still bias corrected
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=65535)
    a = structural_similarity(hr, sr_b, **kw)
    b = structural_similarity(sr_b, hr, **kw)
    assert a == pytest.approx(b, abs=1e-12)
    assert cssim(sr, hr, d=0) == pytest.approx(a, abs=1e-9)


def test_cssim_too_small(rng):
    sr, hr = _pair(rng, 16)
    with pytest.raises(ValueError):
        cssim(sr, hr)


def test_undefined_when_fully_masked(rng):
    sr, hr = _pair(rng)
    with pytest.raises(UndefinedMetric):
        cmse(sr, hr, np.zeros(hr.shape, bool))
    rec = evaluate_pair("x", "RED", "m", sr, hr, np.zeros(hr.shape, bool))
    assert math.isnan(rec.cpsnr) and math.isnan(rec.cssim)


def test_offset_and_translation_invariance(rng):
    hr = rng.integers(1000, 50000, (24, 24)).astype(np.int64)
    sr = (hr + rng.normal(0, 300, hr.shape)).round().astype(np.int64)
    base_p, base_s = cpsnr(sr, hr), cssim(sr, hr)
    assert cpsnr(sr + 123, hr) == pytest.approx(base_p, rel=1e-9)
    assert cssim(sr + 123, hr) == pytest.approx(base_s, rel=1e-9)
    # a constructed translation: sr is hr shifted, compared on a larger canvas
    canvas = rng.integers(1000, 50000, (30, 30)).astype(np.int64)
    ref = canvas[3:27, 3:27]
    for dy, dx in [(1, -2), (-3, 3), (0, 0)]:
        moved = canvas[3 - dy:27 - dy, 3 - dx:27 - dx]
        assert cpsnr(moved, ref) == math.inf


def test_noise_monotone(rng):
    hr = rng.integers(10000, 30000, (32, 32)).astype(np.float64)
    medians = []
    for amp in [50, 100, 200, 400, 800]:
        vals = [cpsnr((hr + rng.normal(0, amp, hr.shape)).round(), hr) for _ in range(5)]
        medians.append(np.median(vals))
    assert all(a > b for a, b in zip(medians, medians[1:]))


def test_aggregate_and_io(tmp_path):
    recs = [
        EvalRecord("a", "RED", "rams", 50.0, 0.99),
        EvalRecord("b", "RED", "rams", 48.0, 0.97),
        EvalRecord("c", "RED", "rams", math.inf, 1.0),
        EvalRecord("a", "NIR", "bicubic", 45.0, 0.95),
    ]
    out = {(s.band, s.method): s for s in aggregate(recs)}
    assert out["RED", "rams"].cpsnr == 49.0
    assert out["RED", "rams"].n_infinite == 1
    assert out["NIR", "bicubic"].cpsnr == 45.0
    assert aggregate(recs[:1])[0].cssim == 0.99
    write_records(tmp_path / "r.tsv", recs)
    assert read_records(tmp_path / "r.tsv") == recs


def test_record_rejects_cssim_above_one():
    with pytest.raises(ValueError):
        EvalRecord("a", "RED", "m", 40.0, 1.5)
