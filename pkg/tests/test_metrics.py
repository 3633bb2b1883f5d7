import math

import numpy as np
import pytest
from PIL import Image

from invreg.errors import ValidationError
from invreg.metrics import (
    difference_image,
    entropy,
    global_cc,
    landmark_report,
    mutual_information,
    overlay_slice,
    save_png,
)
from invreg.synth import SynthConfig, make_pair
from invreg.volio import LandmarkSet, make_field, make_volume
from invreg.warp import warp_volume


def _rand(dims, seed):
    return np.random.default_rng(seed).random(dims)


def test_cc_self_and_negation():
    x = _rand((16, 16, 16), 0)
    assert global_cc(x, x) == pytest.approx(1.0, abs=1e-12)
    assert global_cc(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_cc_constant_convention():
    x = _rand((8, 8, 8), 1)
    c = np.full((8, 8, 8), 0.3)
    assert global_cc(x, c) == 0.0
    assert global_cc(c, c) == 0.0


def test_cc_affine_invariance():
    x = _rand((12, 12, 12), 2)
    y = _rand((12, 12, 12), 3)
    base = global_cc(x, y)
    assert abs(global_cc(2.5 * x + 0.4, y) - base) < 1e-9
    assert abs(global_cc(x, 0.1 * y - 7.0) - base) < 1e-9


def test_cc_accepts_volumes():
    vol = make_volume(_rand((8, 8, 8), 4).astype(np.float32))
    assert global_cc(vol, vol) == pytest.approx(1.0)


def test_cc_truth_warp_beats_pre_registration():
    cfg = SynthConfig(dims=(32, 32, 32), blob_count=40, field_amplitude=2.0, seed=7)
    source, target, truth, _, _ = make_pair(cfg)
    pre = global_cc(source, target)
    post = global_cc(warp_volume(target, truth), source)
    assert pre < post


def test_mi_identity_equals_entropy():
    x = _rand((24, 24, 24), 8)
    assert mutual_information(x, x) == pytest.approx(entropy(x), abs=1e-9)


def test_mi_symmetric():
    a = _rand((16, 16, 16), 9)
    b = _rand((16, 16, 16), 10)
    assert abs(mutual_information(a, b) - mutual_information(b, a)) < 1e-12


def test_mi_shuffle_near_zero():
    rng = np.random.default_rng(11)
    x = rng.random((64, 64, 64))
    y = x.ravel().copy()
    rng.shuffle(y)
    assert 0.0 <= mutual_information(x, y.reshape(x.shape)) < 0.05


def test_mi_bounded_by_marginal_entropy():
    a = _rand((16, 16, 16), 12)
    b = np.clip(a + 0.1 * _rand((16, 16, 16), 13), 0.0, 1.0)
    mi = mutual_information(a, b)
    assert mi >= 0.0
    assert mi <= min(entropy(a), entropy(b)) + 1e-9


def test_entropy_values():
    assert entropy(np.zeros((8, 8, 8))) == 0.0
    two_level = np.zeros(1000)
    two_level[::2] = 0.99
    assert entropy(two_level) == pytest.approx(math.log(2.0), abs=1e-12)


def test_landmark_zero_field_coincident():
    pts = LandmarkSet(names=("a", "b"), coords=np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    report = landmark_report(pts, pts)
    assert report.mean_mm == 0.0
    assert report.max_mm == 0.0
    assert all(v == 0.0 for v in report.distances_mm.values())


def test_landmark_offset_spacing_arithmetic():
    spacing = (0.0258, 0.0258, 0.04)
    fixed = LandmarkSet(
        names=("a", "b"),
        coords=np.array([[5.0, 5.0, 5.0], [2.0, 8.0, 3.0]]),
        spacing=spacing,
    )
    moving = LandmarkSet(
        names=("a", "b"),
        coords=fixed.coords + np.array([1.0, 0.0, 0.0]),
        spacing=spacing,
    )
    report = landmark_report(fixed, moving)
    for d in report.distances_mm.values():
        assert d == pytest.approx(0.0258, abs=1e-12)
    assert report.std_mm == pytest.approx(0.0, abs=1e-12)


def test_landmark_truth_field_recovers_pairs():
    cfg = SynthConfig(dims=(48, 48, 48), blob_count=40, field_amplitude=2.0, seed=14)
    _, _, truth, lms_src, lms_tgt = make_pair(cfg)
    report = landmark_report(lms_tgt, lms_src, field=truth)
    assert report.mean_mm < 0.5 * min(cfg.spacing)


def test_landmark_name_mismatch():
    a = LandmarkSet(names=("a",), coords=np.array([[1.0, 1.0, 1.0]]))
    b = LandmarkSet(names=("b",), coords=np.array([[1.0, 1.0, 1.0]]))
    with pytest.raises(ValidationError):
        landmark_report(a, b)


def test_landmark_population_std():
    fixed = LandmarkSet(
        names=("a", "b"), coords=np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    )
    moving = LandmarkSet(
        names=("a", "b"), coords=np.array([[1.0, 0.0, 0.0], [13.0, 0.0, 0.0]])
    )
    report = landmark_report(fixed, moving)
    assert report.mean_mm == pytest.approx(2.0)
    assert report.std_mm == pytest.approx(1.0)  # population, not sample
    assert report.max_mm == pytest.approx(3.0)


def test_difference_image_values():
    a = np.array([[[0.5, 1.0, 0.25]]])
    b = np.array([[[0.5, 0.0, 0.75]]])
    img = difference_image(a, b)
    assert img.dtype == np.uint8
    assert img[0, 0, 0] == 255  # identical
    assert img[0, 0, 1] == 0  # unit difference
    assert img[0, 0, 2] == 128  # half difference


def test_difference_image_symmetric():
    a = _rand((6, 6, 6), 15)
    b = _rand((6, 6, 6), 16)
    assert np.array_equal(difference_image(a, b), difference_image(b, a))


def test_overlay_identical_is_yellow():
    x = np.full((4, 4, 4), 0.8)
    rgb = overlay_slice(x, x, axis=2, index=1)
    assert rgb.shape == (4, 4, 3)
    assert (rgb[..., 0] == 204).all()
    assert (rgb[..., 1] == 204).all()
    assert (rgb[..., 2] == 0).all()


def test_overlay_zero_registered_is_red():
    x = np.full((4, 4, 4), 1.0)
    rgb = overlay_slice(x, np.zeros((4, 4, 4)))
    assert (rgb[..., 0] == 255).all()
    assert (rgb[..., 1] == 0).all()


def test_overlay_checkerboard_alternates():
    i, j = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    checks = ((i + j) % 2).astype(np.float64)
    a = np.repeat(checks[:, :, None], 2, axis=2)
    b = 1.0 - a
    rgb = overlay_slice(a, b, axis=2, index=0)
    red = (rgb[..., 0] == 255) & (rgb[..., 1] == 0)
    green = (rgb[..., 0] == 0) & (rgb[..., 1] == 255)
    assert np.array_equal(red, checks == 1)
    assert np.array_equal(green, checks == 0)


def test_overlay_default_center_slice():
    vol = np.zeros((4, 4, 6))
    vol[:, :, 3] = 1.0
    rgb = overlay_slice(vol, vol)
    assert (rgb[..., 0] == 255).all()


def test_overlay_validation():
    x = np.zeros((4, 4, 4))
    with pytest.raises(ValueError):
        overlay_slice(x, np.zeros((4, 4, 5)))
    with pytest.raises(ValueError):
        overlay_slice(x, x, axis=3)
    with pytest.raises(IndexError):
        overlay_slice(x, x, axis=0, index=10)


def test_save_png_round_trip(tmp_path):
    rgb = np.zeros((5, 7, 3), dtype=np.uint8)
    rgb[2, 3] = (255, 128, 0)
    path = tmp_path / "img.png"
    save_png(rgb, path)
    back = np.asarray(Image.open(path))
    assert np.array_equal(back, rgb)
    with pytest.raises(ValueError):
        save_png(rgb.astype(np.float32), tmp_path / "bad.png")
