import numpy as np
import pytest

from invreg.errors import ConfigError
from invreg.synth import SynthConfig, make_blob_volume, make_pair, make_smooth_field

SMALL = SynthConfig(dims=(32, 32, 32), blob_count=20, seed=7)


def test_zero_blobs_gives_zero_volume():
    vol = make_blob_volume(SynthConfig(dims=(16, 16, 16), blob_count=0))
    assert np.array_equal(vol.voxels, np.zeros((16, 16, 16)))


def test_same_seed_identical():
    a = make_blob_volume(SMALL)
    b = make_blob_volume(SMALL)
    assert np.array_equal(a.voxels, b.voxels)
    fa = make_smooth_field(SMALL)
    fb = make_smooth_field(SMALL)
    assert np.array_equal(fa.components, fb.components)


def test_different_seed_differs():
    a = make_blob_volume(SMALL)
    b = make_blob_volume(SynthConfig(dims=(32, 32, 32), blob_count=20, seed=8))
    assert not np.array_equal(a.voxels, b.voxels)


def test_volume_normalized():
    vol = make_blob_volume(SMALL)
    assert vol.voxels.max() == pytest.approx(1.0)
    assert vol.voxels.min() == pytest.approx(0.0)


def test_zero_amplitude_field_and_identical_pair():
    cfg = SynthConfig(dims=(24, 24, 24), blob_count=10, field_amplitude=0.0, seed=2)
    field = make_smooth_field(cfg)
    assert np.array_equal(field.components, np.zeros_like(field.components))
    source, target, truth, _, _ = make_pair(cfg)
    assert np.array_equal(truth.components, np.zeros_like(truth.components))
    assert np.allclose(source.voxels, target.voxels, atol=1e-6)


def test_field_peak_magnitude_matches_amplitude():
    cfg = SynthConfig(dims=(32, 32, 32), field_amplitude=3.0, seed=5)
    field = make_smooth_field(cfg)
    mag = np.sqrt((field.components**2).sum(axis=0))
    assert 2.99 <= mag.max() <= 3.01


def test_field_vanishes_at_boundary():
    field = make_smooth_field(SynthConfig(dims=(32, 32, 32), field_amplitude=3.0, seed=5))
    mag = np.sqrt((field.components**2).sum(axis=0))
    for axis in range(3):
        assert np.abs(np.take(mag, 0, axis=axis)).max() < 1e-6
        assert np.abs(np.take(mag, -1, axis=axis)).max() < 1e-6


def test_landmark_pairs_consistent_with_truth():
    cfg = SynthConfig(dims=(48, 48, 48), blob_count=40, seed=3)
    _, _, truth, lms_src, lms_tgt = make_pair(cfg)
    assert lms_src.names == lms_tgt.names
    assert len(lms_src) > 0
    # each target point is the source point displaced by the field there
    from invreg.synth import _sample_field

    for p, q in zip(lms_src.coords, lms_tgt.coords):
        u = _sample_field(truth.components, p)
        assert np.abs(q - (p + u)).max() < 1e-4


def test_landmark_count_honored():
    cfg = SynthConfig(dims=(48, 48, 48), blob_count=40, landmark_count=5, seed=3)
    _, _, _, lms_src, _ = make_pair(cfg)
    assert len(lms_src) == 5


def test_mild_field_preserves_orientation():
    # amplitude well under the smoothness scale keeps the map locally invertible:
    # det(I + grad u) stays positive everywhere
    cfg = SynthConfig(dims=(32, 32, 32), field_amplitude=2.0, field_smoothness=8.0, seed=9)
    u = make_smooth_field(cfg).components
    gx = np.stack(np.gradient(u[0]))
    gy = np.stack(np.gradient(u[1]))
    gz = np.stack(np.gradient(u[2]))
    jac = np.zeros(cfg.dims + (3, 3))
    for j in range(3):
        jac[..., 0, j] = gx[j]
        jac[..., 1, j] = gy[j]
        jac[..., 2, j] = gz[j]
    jac += np.eye(3)
    det = np.linalg.det(jac)
    assert det.min() > 0


def test_pair_source_is_warped_target():
    from invreg.warp import warp_volume

    cfg = SynthConfig(dims=(24, 24, 24), blob_count=15, seed=4)
    source, target, truth, _, _ = make_pair(cfg)
    again = warp_volume(target, truth)
    assert np.array_equal(source.voxels, again.voxels)


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(field_amplitude=-1.0)
    with pytest.raises(ConfigError):
        SynthConfig(field_smoothness=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(blob_count=-3)
    with pytest.raises(ConfigError):
        make_blob_volume(SynthConfig(dims=(4, 16, 16)))
