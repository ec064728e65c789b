import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contslam.geometry import CameraIntrinsics, Pose3
from contslam.photometric import (
    DimensionMismatch,
    ImageTriplet,
    LossWeights,
    NonFinite,
    NoSources,
    photometric_dissimilarity,
    reprojection_loss,
    smoothness_loss,
    ssim,
    total_loss,
    velocity_loss,
    warp_image,
)

K = CameraIntrinsics(60.0, 60.0, 24.0, 16.0, 48, 32)
rng = np.random.default_rng(0)
images = arrays(np.float64, (8, 8), elements=st.floats(0, 1))


def random_image(h=32, w=48, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w))


def test_identity_warp_reproduces_source():
    src = random_image()
    warped, mask = warp_image(src, np.full(src.shape, 3.0), Pose3.identity(), K)
    assert torch.equal(warped, torch.as_tensor(src))
    assert bool(mask.all())


def test_motion_behind_camera_masks_everything():
    src = random_image()
    T = Pose3.from_rt(np.eye(3), [0, 0, -10.0])
    _, mask = warp_image(src, np.full(src.shape, 3.0), T, K)
    assert not bool(mask.any())


def test_warp_rejects_mismatched_dimensions():
    with pytest.raises(DimensionMismatch):
        warp_image(random_image(), np.ones((10, 10)), Pose3.identity(), K)


def test_lateral_shift_by_whole_pixels():
    # depth 6 m and fx 60 px: 0.1 m sideways moves content by exactly one pixel
    src = random_image()
    T = Pose3.from_rt(np.eye(3), [0.1, 0, 0])
    warped, mask = warp_image(src, np.full(src.shape, 6.0), T, K)
    assert np.allclose(warped.numpy()[:, :-1], src[:, 1:], atol=1e-12)
    assert not bool(mask[:, -1].any()) and bool(mask[:, :-1].all())


def test_ssim_of_image_with_itself_is_one():
    a = random_image()
    assert torch.allclose(ssim(a, a), torch.ones(a.shape, dtype=torch.float64))


def test_ssim_constant_zero_vs_one():
    s = ssim(np.zeros((8, 8)), np.ones((8, 8)))
    assert torch.allclose(s, torch.full((8, 8), 1e-4 / (1 + 1e-4), dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(images, images)
def test_ssim_is_symmetric_and_bounded(a, b):
    s1, s2 = ssim(a, b), ssim(b, a)
    assert torch.allclose(s1, s2)
    assert float(s1.min()) >= -1 - 1e-12 and float(s1.max()) <= 1 + 1e-12


def test_dissimilarity_examples():
    a = random_image()
    assert float(photometric_dissimilarity(a, a).abs().max()) < 1e-12
    b = np.full((8, 8), 0.5)
    assert torch.allclose(photometric_dissimilarity(b, b + 0.3, alpha=0.0), torch.full((8, 8), 0.3, dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(images, images, st.floats(0, 1))
def test_dissimilarity_range(a, b, alpha):
    d = photometric_dissimilarity(a, b, alpha=alpha)
    assert float(d.min()) >= 0 and float(d.max()) <= 1 + 1e-12


def test_static_triplet_is_fully_masked():
    img = random_image()
    loss, mask = reprojection_loss(img, [img, img], [img, img])
    assert not bool(mask.any()) and float(loss) == 0.0


def test_perfect_reconstruction_gives_zero_loss_and_full_mask():
    tgt = random_image(seed=1)
    srcs = [random_image(seed=2), random_image(seed=3)]
    loss, mask = reprojection_loss(tgt, srcs, [tgt, tgt])
    assert bool(mask.all()) and float(loss) == 0.0


def test_minimum_prefers_clean_source():
    tgt = random_image(seed=1)
    srcs = [random_image(seed=2), random_image(seed=3)]
    clean = tgt + 0.01 * random_image(seed=4)
    occluded = tgt.copy()
    occluded[10:20, 10:30] = 0.0
    both, _ = reprojection_loss(tgt, srcs, [occluded, clean])
    only_occ, _ = reprojection_loss(tgt, srcs[:1], [occluded])
    only_clean, _ = reprojection_loss(tgt, srcs[1:], [clean])
    assert float(both) <= float(only_occ) + 1e-12
    assert float(both) <= float(only_clean) + 1e-12


def test_ties_go_to_first_source_and_invalid_never_wins():
    tgt = random_image(seed=1)
    src = random_image(seed=2)
    w = tgt + 0.05
    valid = [np.zeros(tgt.shape, bool), np.ones(tgt.shape, bool)]
    loss_a, _ = reprojection_loss(tgt, [src, src], [w, w], valid=valid)
    loss_b, _ = reprojection_loss(tgt, [src], [w])
    assert float(loss_a) == pytest.approx(float(loss_b))


def test_reprojection_needs_sources():
    with pytest.raises(NoSources):
        reprojection_loss(random_image(), [], [])


def test_smoothness_constant_disparity_is_zero():
    assert float(smoothness_loss(np.full((4, 4), 2.0), random_image(4, 4))) == 0.0


def test_smoothness_ramp_matches_hand_computation():
    # disparity 1..4 along x on a constant image: mean 2.5, each x-difference 1/2.5
    disp = np.tile(np.arange(1.0, 5.0), (4, 1))
    assert float(smoothness_loss(disp, np.zeros((4, 4)))) == pytest.approx(0.4)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0.01, 10)), st.floats(0.01, 100))
def test_smoothness_scale_invariance(disp, scale):
    img = random_image(6, 6)
    assert float(smoothness_loss(disp * scale, img)) == pytest.approx(float(smoothness_loss(disp, img)), rel=1e-9, abs=1e-12)


def test_velocity_loss_examples():
    T1 = Pose3.from_rt(np.eye(3), [0, 0, 1.0])
    T08 = Pose3.from_rt(np.eye(3), [0, 0.8, 0])
    assert float(velocity_loss([T1], [2.0], [0.5])) == pytest.approx(0.0)
    assert float(velocity_loss([T08, T08], [2.0, 2.0], [0.5, 0.5])) == pytest.approx(0.4)
    assert float(velocity_loss([Pose3.identity()], [0.0], [0.5])) == 0.0


def test_total_loss_examples():
    assert float(total_loss(0.5, 10.0, 2.0)) == pytest.approx(0.61)
    assert float(total_loss(0.0, 0.0, 0.0)) == 0.0
    assert float(total_loss(0.3, 5.0, 7.0, LossWeights(smoothness=0, velocity=0))) == pytest.approx(0.3)
    with pytest.raises(NonFinite):
        total_loss(float("nan"), 0.0, 0.0)


@pytest.mark.parametrize("kw", [{"smoothness": -1}, {"alpha": 1.5}, {"c1": 0}])
def test_loss_weight_validation(kw):
    with pytest.raises(ValueError):
        LossWeights(**kw)


def test_triplet_validation_and_distances():
    f = np.zeros((4, 4))
    t = ImageTriplet((f, f, f), (2.0, 4.0), (0.0, 0.5, 1.0))
    assert t.distances() == (1.0, 2.0)
    with pytest.raises(ValueError):
        ImageTriplet((f, f, f), (2.0, 4.0), (0.0, 0.5, 0.5))
    with pytest.raises(ValueError):
        ImageTriplet((f, f, f), (-1.0, 4.0), (0.0, 0.5, 1.0))
