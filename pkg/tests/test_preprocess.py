from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from retina_grader.preprocess import (
    augment,
    color_normalize,
    crop_to_square,
    gaussian_blur,
    gaussian_kernel,
    preprocess_pipeline,
    read_ppm,
    resize,
    rotate,
    square_box,
    write_ppm,
)
from retina_grader.serialization import load_tensor

DATA = Path(__file__).parent / "data"


def disc_image(h, w, diameter, value=200):
    yy, xx = np.mgrid[0:h, 0:w]
    disc = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2) <= diameter / 2
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[disc] = value
    return img


def test_ppm_roundtrip_and_comments(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    body = img.tobytes()
    (tmp_path / "b.ppm").write_bytes(b"P6\n# made by hand\n7 5\n255\n" + body)
    np.testing.assert_array_equal(read_ppm(tmp_path / "b.ppm"), img)


def test_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "x.ppm")


def test_blur_constant_impulse_and_variance():
    const = np.full((9, 9, 3), 7.0)
    np.testing.assert_allclose(gaussian_blur(const, 2.0), const, atol=1e-5)
    impulse = np.zeros((21, 21))
    impulse[10, 10] = 1.0
    out = gaussian_blur(impulse, 1.0)
    k = gaussian_kernel(1.0)
    assert out[10, 10] == pytest.approx(k[len(k) // 2] ** 2)
    assert out.sum() == pytest.approx(1.0, abs=1e-5)
    noise = np.random.default_rng(1).random((32, 32))
    assert gaussian_blur(noise, 1.5).var() <= noise.var()
    with pytest.raises(ValueError):
        gaussian_blur(noise, 0.0)


def test_blur_matches_scipy_gaussian_filter():
    img = np.random.default_rng(2).random((40, 30))
    ref = gaussian_filter(img, 2.0, mode="nearest", truncate=3.0)
    np.testing.assert_allclose(gaussian_blur(img, 2.0), ref, atol=1e-12)


def test_color_normalize_constant_and_contrast():
    out = color_normalize(np.full((10, 12, 3), 90, dtype=np.uint8))
    np.testing.assert_allclose(out, 128 / 255)
    img = np.zeros((40, 40, 3), dtype=np.uint8)
    img[18:22, 18:22] = 100
    assert color_normalize(img)[20, 20, 0] > 100 / 255
    assert 0.0 <= color_normalize(img).min() and color_normalize(img).max() <= 1.0


def test_crop_centres_on_disc():
    img = disc_image(800, 1000, 700)
    top, left, side = square_box(img.astype(float) / 255)
    assert abs(side - 700) <= 2
    assert abs(top + side / 2 - 400) <= 2 and abs(left + side / 2 - 500) <= 2


def test_crop_fallback_and_square_passthrough():
    assert square_box(np.zeros((800, 1000, 3))) == (0, 100, 800)
    img = np.full((20, 20, 3), 0.5)
    assert crop_to_square(img).shape == (20, 20, 3)


def test_resize_rules():
    checker = np.array([[0.0, 1.0], [1.0, 0.0]])[..., None]
    assert resize(checker, 1)[0, 0, 0] == pytest.approx(0.5)
    img = np.random.default_rng(3).random((6, 6, 3))
    np.testing.assert_allclose(resize(img, 6), img, atol=1e-6)
    np.testing.assert_allclose(resize(np.full((7, 7, 1), 0.3), 4), 0.3)
    with pytest.raises(ValueError):
        resize(np.zeros((4, 5, 3)), 2)


def test_pipeline_golden_file():
    raw = read_ppm(DATA / "fundus_fixture.ppm")
    golden = load_tensor(DATA / "fundus_fixture_side32.mtt")
    out = preprocess_pipeline(raw, 32)
    assert out.dtype == np.float32 and out.shape == (3, 32, 32)
    np.testing.assert_array_equal(out, golden)


@pytest.mark.xfail(strict=True, reason="the 4x high-pass re-amplifies residual detail; see decisions ledger")
def test_pipeline_is_approximately_idempotent():
    out = preprocess_pipeline(read_ppm(DATA / "fundus_fixture.ppm"), 32)
    again = preprocess_pipeline((out * 255).round().astype(np.uint8).transpose(1, 2, 0), 32)
    assert np.abs(again - out).mean() < 0.05


@settings(max_examples=20, deadline=None)
@given(h=st.integers(4, 40), w=st.integers(4, 40), side=st.integers(1, 24), seed=st.integers(0, 1000))
def test_pipeline_shape_and_range(h, w, side, seed):
    raw = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    out = preprocess_pipeline(raw, side)
    assert out.shape == (3, side, side)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_identity_and_180():
    img = np.random.default_rng(4).random((3, 9, 9)).astype(np.float32)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(augment(img, rng, angle=0, hflip=False, vflip=False), img)
    turned = augment(img, rng, angle=180, hflip=False, vflip=False)
    np.testing.assert_allclose(turned, img[:, ::-1, ::-1], atol=1e-4)


def test_augment_is_deterministic_and_keeps_range():
    img = np.random.default_rng(5).random((3, 16, 16)).astype(np.float32)
    a = augment(img, np.random.default_rng(9))
    b = augment(img, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert a.shape == img.shape and 0.0 <= a.min() and a.max() <= 1.0


def test_rotation_fills_corners_with_zero():
    out = rotate(np.ones((1, 11, 11)), 45)
    assert out[0, 0, 0] == 0.0 and out[0, 5, 5] == pytest.approx(1.0)
