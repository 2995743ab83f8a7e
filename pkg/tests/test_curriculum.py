import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualinject.curriculum import CurriculumParams, crop_box, crop_lower_bound, random_crop, sample_crop_scale
from dualinject.tensor import ContractError

from oracles import crop_bound

P = CurriculumParams(iterations=800)


def test_published_defaults():
    p = CurriculumParams()
    assert (p.r_min, p.r_max, p.lambda_curr) == (0.1, 1.0, 0.025)


def test_start_end_and_midpoint():
    assert crop_lower_bound(0, P) == 1.0
    assert crop_lower_bound(800, P) == pytest.approx(0.1225, abs=1e-12)
    assert crop_lower_bound(400, P) == pytest.approx(0.2423024947075771, abs=1e-12)


def test_matches_oracle_everywhere():
    for i in range(801):
        assert crop_lower_bound(i, P) == pytest.approx(crop_bound(i, 800), abs=1e-12)


def test_strictly_decreasing_and_bounded():
    vals = [crop_lower_bound(i, P) for i in range(801)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert min(vals) >= crop_lower_bound(800, P) and max(vals) <= P.r_max


def test_clamp_past_end():
    assert crop_lower_bound(5000, P) == crop_lower_bound(800, P)
    with pytest.raises(ContractError):
        crop_lower_bound(-1, P)


@pytest.mark.parametrize("kw", [dict(r_min=0.0), dict(r_min=0.5, r_max=0.4), dict(r_max=1.2),
                                dict(lambda_curr=0.0), dict(lambda_curr=1.5), dict(iterations=0)])
def test_invalid_params(kw):
    with pytest.raises(ContractError):
        CurriculumParams(**kw)


def test_degenerate_interval_returns_rmax():
    rng = np.random.default_rng(0)
    assert all(sample_crop_scale(rng, 1.0, 1.0) == 1.0 for _ in range(10))
    with pytest.raises(ContractError):
        sample_crop_scale(rng, 0.9, 0.5)


def test_sample_mean_and_bounds():
    rng = np.random.default_rng(1)
    r_i = crop_lower_bound(300, P)
    draws = np.array([sample_crop_scale(rng, r_i, 1.0) for _ in range(100_000)])
    assert draws.min() >= r_i and draws.max() <= 1.0
    assert abs(draws.mean() - (r_i + 1.0) / 2) < 0.01 * (r_i + 1.0) / 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 800), st.integers(0, 2 ** 32 - 1))
def test_every_draw_within_schedule(i, seed):
    r_i = crop_lower_bound(i, P)
    r = sample_crop_scale(np.random.default_rng(seed), r_i, P.r_max)
    assert r_i <= r <= P.r_max


def test_full_scale_crop_is_identity():
    img = np.random.default_rng(2).uniform(0, 1, (3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(random_crop(img, 1.0, np.random.default_rng(3)), img)


def test_half_scale_crop_box():
    rng = np.random.default_rng(4)
    for _ in range(200):
        top, left, side = crop_box((32, 32), 0.5, rng)
        assert side == 16 and 0 <= top <= 16 and 0 <= left <= 16


def test_crop_side_rounds_up_and_clamps():
    rng = np.random.default_rng(5)
    assert crop_box((32, 32), 0.3, rng)[2] == 10  # ceil(9.6)
    assert crop_box((32, 32), 0.001, rng)[2] == 1
    for bad in (0.0, 1.5):
        with pytest.raises(ContractError):
            crop_box((32, 32), bad, rng)


def test_crop_is_reproducible_and_resized():
    img = np.random.default_rng(6).uniform(0, 1, (3, 32, 32)).astype(np.float32)
    a = random_crop(img, 0.5, np.random.default_rng(7))
    b = random_crop(img, 0.5, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert a.shape == img.shape
    top, left, side = crop_box((32, 32), 0.5, np.random.default_rng(7))
    # nearest 2x upsample: every 2x2 block repeats one source pixel
    np.testing.assert_array_equal(a[:, ::2, ::2], img[:, top:top + side, left:left + side])
    np.testing.assert_array_equal(a[:, 1::2, 1::2], img[:, top:top + side, left:left + side])


def test_bilinear_option():
    img = np.random.default_rng(8).uniform(0, 1, (3, 32, 32)).astype(np.float32)
    out = random_crop(img, 0.5, np.random.default_rng(9), interpolation="bilinear")
    assert out.shape == img.shape
    assert img.min() <= out.min() and out.max() <= img.max()
    with pytest.raises(ContractError):
        random_crop(img, 0.5, np.random.default_rng(9), interpolation="cubic")
