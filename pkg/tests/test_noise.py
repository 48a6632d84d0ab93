import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guirobust import noise
from guirobust.noise import NoiseSpec


def rand_img(seed=0, h=24, w=32):
    return np.random.default_rng(seed).random((h, w, 3))


def test_gaussian_noise_identity_and_determinism():
    img = rand_img()
    assert np.array_equal(noise.gaussian_noise(img, 0.0, 3), img)
    a = noise.gaussian_noise(img, 0.1, 5)
    assert np.array_equal(a, noise.gaussian_noise(img, 0.1, 5))
    assert not np.array_equal(a, noise.gaussian_noise(img, 0.1, 6))
    with pytest.raises(ValueError):
        noise.gaussian_noise(img, -0.1, 0)


def test_gaussian_noise_statistics():
    img = np.full((256, 256, 3), 0.5)
    out = noise.gaussian_noise(img, 0.1, 1)
    assert abs(out.mean() - 0.5) <= 0.01
    assert abs(out.std() - 0.1) <= 0.01


def test_blur_identity_constant_and_oversize():
    img = rand_img()
    assert np.array_equal(noise.gaussian_blur(img, 0, 1.0), img)
    c = np.full((10, 12, 3), 0.3)
    assert np.allclose(noise.gaussian_blur(c, 2, 1.0), 0.3, atol=1e-12)
    with pytest.raises(ValueError):
        noise.gaussian_blur(np.zeros((4, 4, 3)), 2, 1.0)
    with pytest.raises(ValueError):
        noise.gaussian_blur(img, 1, 0.0)


def test_blur_matches_dense_convolution():
    img = rand_img(1, 5, 5)
    radius, sb = 1, 0.8
    k1 = noise.gaussian_kernel(radius, sb)
    k2 = np.outer(k1, k1)
    ref = np.zeros_like(img)
    for y in range(5):
        for x in range(5):
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    yy = min(max(y + dy, 0), 4)
                    xx = min(max(x + dx, 0), 4)
                    ref[y, x] += k2[dy + radius, dx + radius] * img[yy, xx]
    assert np.abs(noise.gaussian_blur(img, radius, sb) - ref).max() <= 1e-10


def test_blur_preserves_mean_of_interior_dominated_image():
    img = np.zeros((64, 64, 3))
    img[20:44, 20:44] = 0.8
    out = noise.gaussian_blur(img, 3, 1.5)
    assert abs(out.mean() - img.mean()) <= 1e-6


def test_color_jitter_identity_and_absorbing():
    img = rand_img(2)
    assert np.abs(noise.color_jitter(img) - img).max() <= 1e-6
    assert np.all(noise.color_jitter(img, brightness=0.0) == 0.0)
    with pytest.raises(ValueError):
        noise.color_jitter(img, brightness=-0.5)
    with pytest.raises(ValueError):
        noise.color_jitter(img, hue_shift=0.6)


@given(st.floats(-0.5, 0.5), st.floats(0.0, 1.0))
@settings(max_examples=50, deadline=None)
def test_gray_is_hue_fixed_point(shift, level):
    gray = np.full((4, 4, 3), level)
    out = noise.color_jitter(gray, hue_shift=shift)
    assert np.abs(out - gray).max() <= 1e-6


def test_hsv_round_trip():
    img = rand_img(3)
    assert np.abs(noise.hsv_to_rgb(noise.rgb_to_hsv(img)) - img).max() <= 1e-12


def test_jitter_ranges_are_seeded():
    img = rand_img(4)
    kw = dict(brightness=(0.7, 1.3), saturation=(0.7, 1.3), hue_shift=(-0.1, 0.1))
    a = noise.color_jitter(img, seed=1, **kw)
    assert np.array_equal(a, noise.color_jitter(img, seed=1, **kw))
    assert not np.array_equal(a, noise.color_jitter(img, seed=2, **kw))


def test_contrast_cases():
    img = rand_img(5)
    assert np.array_equal(noise.contrast(img, 1.0), img)
    flat = noise.contrast(img, 0.0)
    m = (img @ noise.LUMA).mean()
    assert np.allclose(flat, m, atol=1e-12)
    two = np.where(np.arange(16)[:, None, None] % 2 == 0, 0.25, 0.75) * np.ones((16, 4, 3))
    out = noise.contrast(two, 2.0)
    assert set(np.unique(out)) == {0.0, 1.0}
    with pytest.raises(ValueError):
        noise.contrast(img, -1.0)


def test_resize_budget_cases():
    img = rand_img(6, 20, 30)
    assert np.array_equal(noise.resize_budget(img, 600), img)
    sq = rand_img(7, 400, 400)
    assert noise.resize_budget(sq, 40000).shape == (200, 200, 3)
    c = np.full((50, 70, 3), 0.42)
    for budget in (64, 500, 1234, 3000):
        out = noise.resize_budget(c, budget)
        assert out.shape[0] * out.shape[1] <= budget
        assert np.allclose(out, 0.42, atol=1e-12)
    with pytest.raises(ValueError):
        noise.resize_budget(img, 10)


@given(st.integers(8, 300), st.integers(8, 300), st.integers(64, 20000))
@settings(max_examples=200, deadline=None)
def test_budget_shape_respects_budget(h, w, budget):
    hh, ww = noise.budget_shape(h, w, budget)
    if h * w <= budget:
        assert (hh, ww) == (h, w)
    else:
        assert hh * ww <= budget
        assert hh <= h and ww <= w
        # one more row at the same aspect would break the budget
        nxt = hh + 1
        assert nxt > h or nxt * max(1, round(nxt * w / h)) > budget


@pytest.mark.parametrize("kind", noise.KINDS)
def test_identity_specs(kind):
    img = rand_img(8).astype(np.float32)
    out = NoiseSpec.identity(kind).apply(img, seed=123)
    tol = 1e-6 if kind == "color_jitter" else 0.0
    assert out.shape == img.shape
    assert np.abs(out - img).max() <= tol


def test_outputs_stay_in_range():
    img = rand_img(9)
    for spec in noise.default_grid():
        out = spec.apply(img, seed=4)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_spec_serialization_and_validation():
    for spec in noise.default_grid():
        again = NoiseSpec.from_dict(spec.to_dict())
        assert again == spec and again.label == spec.label
    with pytest.raises(ValueError):
        NoiseSpec("salt_pepper")
    with pytest.raises(ValueError):
        NoiseSpec("contrast", {"gamma": 2})
    with pytest.raises(ValueError):
        NoiseSpec.from_dict({"kind": "contrast", "extra": 1})


def test_pipeline_order_is_fixed():
    img = rand_img(10, 40, 40)
    specs = [NoiseSpec("contrast", {"factor": 1.5}), NoiseSpec("resize_budget", {"max_pixels": 400})]
    a = noise.apply_pipeline(img, specs)
    b = noise.apply_pipeline(img, specs[::-1])
    assert np.array_equal(a, b)
    manual = noise.contrast(noise.resize_budget(img, 400), 1.5)
    assert np.array_equal(a, manual)
