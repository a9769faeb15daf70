import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htr.dataset import Alphabet, DataError
from htr.preprocessing import (
    PRESETS,
    AugmentParams,
    CanvasSpec,
    augment,
    fit_scale,
    fit_to_canvas,
    make_batch,
    pad_transcript,
    resize_bilinear,
    strip_margins,
)

WORD = PRESETS["word"]


def test_canvas_presets():
    assert (PRESETS["line"].height, PRESETS["line"].width) == (128, 1024)
    assert (WORD.height, WORD.width) == (64, 256)
    with pytest.raises(ValueError):
        CanvasSpec(30, 256)


def test_small_image_is_centred_unscaled():
    img = np.random.default_rng(0).random((32, 100))
    canvas, place = fit_to_canvas(img, WORD)
    assert place == (16, 78, 32, 100)
    np.testing.assert_array_equal(canvas[16:48, 78:178], img)


def test_large_image_scaled_by_half():
    img = np.random.default_rng(1).random((128, 512))
    canvas, place = fit_to_canvas(img, WORD)
    assert fit_scale(128, 512, WORD)[0] == 0.5
    assert place == (0, 0, 64, 256)


def test_constant_image_pads_with_its_value():
    canvas, _ = fit_to_canvas(np.full((10, 20), 0.3), WORD)
    assert np.all(canvas == 0.3)


def test_padding_uses_median_of_source():
    img = np.zeros((5, 5))
    img[0, :3] = 1.0
    img[4, 4] = 0.7
    canvas, p = fit_to_canvas(img, WORD)
    mask = np.ones(canvas.shape, dtype=bool)
    mask[p.top : p.top + p.height, p.left : p.left + p.width] = False
    assert np.all(canvas[mask] == np.median(img))


def test_one_pixel_image():
    canvas, p = fit_to_canvas(np.array([[0.9]]), WORD)
    assert p == (31, 127, 1, 1)
    assert np.all(canvas == 0.9)


def test_exact_fit():
    img = np.random.default_rng(2).random((64, 256))
    canvas, p = fit_to_canvas(img, WORD)
    assert p == (0, 0, 64, 256)
    np.testing.assert_array_equal(canvas, img)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 600))
def test_fit_invariants(h, w):
    rng = np.random.default_rng(h * 1000 + w)
    img = rng.random((h, w))
    canvas, p = fit_to_canvas(img, WORD)
    assert canvas.shape == (64, 256)
    assert p.top == (64 - p.height) // 2 and p.left == (256 - p.width) // 2
    inside = np.zeros(canvas.shape, dtype=bool)
    inside[p.top : p.top + p.height, p.left : p.left + p.width] = True
    np.testing.assert_allclose(canvas[~inside], np.median(img))
    if h <= 64 and w <= 256:
        np.testing.assert_array_equal(canvas[inside].reshape(h, w), img)
    else:
        s = min(64 / h, 256 / w)
        assert abs(p.height - max(h * s, 1)) <= 0.5 + 1e-9 and abs(p.width - max(w * s, 1)) <= 0.5 + 1e-9
        assert p.height == 64 or p.width == 256


def test_bilinear_resize_constant_and_identity():
    np.testing.assert_allclose(resize_bilinear(np.full((7, 9), 0.4), 3, 5), 0.4)
    img = np.random.default_rng(0).random((6, 8))
    np.testing.assert_array_equal(resize_bilinear(img, 6, 8), img)
    # exact 2x downscale of a linear ramp averages neighbouring pairs
    ramp = np.tile(np.arange(8.0), (2, 1))
    np.testing.assert_allclose(resize_bilinear(ramp, 1, 4)[0], [0.5, 2.5, 4.5, 6.5])


def test_augment_zero_params_is_identity():
    img = np.random.default_rng(0).random((20, 50))
    out = augment(img, AugmentParams(0, 0, 0), seed=3)
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(augment(img, AugmentParams(enabled=False), seed=3), img)


def test_augment_noise_mean():
    out = augment(np.full((64, 256), 0.5), AugmentParams(0, 0, 0.1), seed=1)
    assert abs(out.mean() - 0.5) < 0.01
    assert out.std() > 0.05


def test_augment_deterministic_and_bounded():
    img = np.random.default_rng(0).random((30, 90))
    a = augment(img, AugmentParams(), seed=[4, 2])
    b = augment(img, AugmentParams(), seed=[4, 2])
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, augment(img, AugmentParams(), seed=[4, 3]))


def test_augment_rotation_fills_exposed_corners_with_median():
    img = np.zeros((40, 40))
    img[10:30, 10:30] = 1.0
    out = augment(img, AugmentParams(max_rotation_deg=30, max_shear=0, noise_sigma=0), seed=0)
    assert out.shape == img.shape
    assert out[0, 0] == np.median(img)


def test_pad_transcript():
    assert pad_transcript("He rose from", "train") == " He rose from "
    assert pad_transcript("abc", "eval") == "abc"
    assert len(pad_transcript("abcd", "train")) == 6
    assert strip_margins(" ab c ") == "ab c"
    with pytest.raises(DataError):
        pad_transcript("   ", "train")


def test_make_batch_shapes_and_labels():
    alpha = Alphabet(" ab")
    imgs = [np.zeros((10, 30)), np.ones((12, 40)) * 0.2, np.zeros((5, 5)), np.zeros((8, 8))]
    b = make_batch([(im, "ab") for im in imgs], PRESETS["line"], alpha, "train", None)
    assert b.images.shape == (4, 1, 128, 1024)
    assert b.labels[0] == [1, 2, 3, 1]
    assert b.lengths == [4] * 4
    single = make_batch([(imgs[1], "ab")], WORD, alpha, "eval")
    np.testing.assert_array_equal(single.images[0, 0], fit_to_canvas(imgs[1], WORD)[0].astype(np.float32))


def test_make_batch_reports_unknown_character():
    with pytest.raises(DataError, match="sample 1.*'z'"):
        make_batch([(np.zeros((4, 4)), "a"), (np.zeros((4, 4)), "az")], WORD, Alphabet(" a"), "eval")


def test_resize_only_stretches():
    alpha = Alphabet(" a")
    img = np.random.default_rng(0).random((8, 16))
    b = make_batch([(img, "a")], WORD, alpha, "eval", resize_only=True)
    np.testing.assert_allclose(b.images[0, 0], resize_bilinear(img, 64, 256), rtol=1e-6)
