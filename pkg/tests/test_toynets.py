import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contslam.geometry import CameraIntrinsics
from contslam.photometric import BranchLog, DimensionMismatch, ImageTriplet, LossWeights, branch_log
from contslam.simworld import EnvironmentSpec, SceneSpec, generate_scene
from contslam.toynets import (
    MAX_DISPARITY,
    MIN_DISPARITY,
    AdamState,
    DepthNetToy,
    GraphNotRecorded,
    NetworkPair,
    ParamVector,
    PoseNetToy,
    ShapeMismatch,
    TripletBatch,
    adam_step,
    backward,
    depth_forward,
    finite_difference_gradient,
    jitter_head,
    load_params,
    pose_forward,
    save_params,
)

K = CameraIntrinsics(60.0, 60.0, 48.0, 24.0, 96, 48)
DEPTH = DepthNetToy(48, 96)
POSE = PoseNetToy(48, 96)
PAIR = NetworkPair.for_camera(K)


def image(seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (48, 96))


def random_triplet(seed=0):
    frames = tuple(image(seed + k) for k in range(3))
    return ImageTriplet(frames, (4.0, 4.0), (0.0, 0.25, 0.5))


def test_zero_params_give_midpoint_disparity():
    zero = ParamVector(np.zeros(len(DEPTH.init_params(0))), DEPTH.layout)
    out = depth_forward(image(), zero, DEPTH)
    assert out.shape == (48, 96)
    assert torch.allclose(out, torch.full((48, 96), 5.00005, dtype=torch.float64))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), arrays(np.float64, (48, 96), elements=st.floats(-5, 5)))
def test_disparity_stays_in_bounds(seed, img):
    params = DEPTH.init_params(seed)
    params.values *= 10.0  # push the output sigmoid towards saturation
    out = depth_forward(img, params, DEPTH)
    assert float(out.min()) >= MIN_DISPARITY and float(out.max()) <= MAX_DISPARITY


def test_depth_forward_is_deterministic():
    params = DEPTH.init_params(3)
    a = depth_forward(image(1), params, DEPTH)
    b = depth_forward(image(1), DEPTH.init_params(3), DEPTH)
    assert torch.equal(a, b)


def test_depth_forward_rejects_wrong_size():
    with pytest.raises(DimensionMismatch):
        depth_forward(np.zeros((40, 96)), DEPTH.init_params(0), DEPTH)


def test_untrained_pose_head_predicts_identity():
    xi = pose_forward(image(0), image(1), POSE.init_params(0), POSE)
    assert np.array_equal(xi.vector(), np.zeros(6))


def test_pose_is_not_forced_antisymmetric():
    params = jitter_head(POSE.init_params(0), POSE, 1)
    ab = pose_forward(image(0), image(1), params, POSE).vector()
    ba = pose_forward(image(1), image(0), params, POSE).vector()
    assert np.all(np.isfinite(ab)) and not np.allclose(ab, ba) and not np.allclose(ab, -ba)


def test_pose_forward_is_deterministic():
    params = jitter_head(POSE.init_params(2), POSE, 2)
    a = pose_forward(image(0), image(1), params, POSE).vector()
    b = pose_forward(image(0), image(1), params, POSE).vector()
    assert np.array_equal(a, b)


def test_pose_forward_rejects_unequal_pair():
    with pytest.raises(DimensionMismatch):
        pose_forward(image(0), np.zeros((48, 95)), POSE.init_params(0), POSE)


def test_jitter_only_touches_head_weights():
    params = POSE.init_params(0)
    jittered = jitter_head(params, POSE, 5)
    changed = np.flatnonzero(jittered.values != params.values)
    start = sum(int(np.prod(s)) for n, s in POSE.layout[:4])
    n_head = int(np.prod(dict(POSE.layout)["head.w"]))
    assert changed.min() >= start and changed.max() < start + n_head
    assert np.array_equal(params.values, POSE.init_params(0).values)


def test_backward_requires_recorded_graph():
    with pytest.raises(GraphNotRecorded):
        backward(torch.tensor(1.0, dtype=torch.float64), [torch.zeros(3, requires_grad=True)])


def test_unused_parameter_has_zero_gradient():
    a = torch.ones(3, dtype=torch.float64, requires_grad=True)
    b = torch.ones(2, dtype=torch.float64, requires_grad=True)
    ga, gb = backward((a * a).sum(), [a, b])
    assert np.allclose(ga, 2.0) and np.array_equal(gb, np.zeros(2))


def test_frozen_prefix_gradient_is_exactly_zero():
    d, p = PAIR.init_params(0)
    p = jitter_head(p, PAIR.pose, 0)
    td, tp = d.tensor(True), p.tensor(True)
    batch = TripletBatch.from_triplets([random_triplet()])
    gd, gp = backward(PAIR.batch_loss(td, tp, batch, LossWeights()), [td, tp], (DEPTH.encoder_size, POSE.encoder_size))
    assert np.all(gd[: DEPTH.encoder_size] == 0) and np.all(gp[: POSE.encoder_size] == 0)
    assert np.any(gd[DEPTH.encoder_size :] != 0) and np.any(gp[POSE.encoder_size :] != 0)


def test_finite_differences_of_a_quadratic():
    g = finite_difference_gradient(lambda th: float(np.sum(th**2)), np.array([1.0, 2.0]), h=1e-5)
    assert np.allclose(g, [2.0, 4.0], atol=1e-6)


def test_finite_differences_of_a_constant():
    assert np.array_equal(finite_difference_gradient(lambda th: 3.0, np.ones(4)), np.zeros(4))


def test_finite_differences_need_positive_step():
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda th: 0.0, np.ones(2), h=0.0)


@pytest.fixture(scope="module")
def rendered():
    return generate_scene(EnvironmentSpec("A", texture_seed=2), SceneSpec("s", seed=1, length=6.0))


@pytest.mark.parametrize("seed", [0, 1])
def test_backward_matches_replayed_finite_differences(seed, rendered):
    # small version of the acceptance check: 30 parameters, one seed. Rendered frames,
    # not white noise: on noise many gradients sit below what float64 differences resolve
    rng = np.random.default_rng(seed)
    d, p = PAIR.init_params(seed)
    p = jitter_head(p, PAIR.pose, seed)
    i = int(rng.integers(0, len(rendered) - 4))
    trip = ImageTriplet(tuple(rendered.frame(k) for k in (i, i + 2, i + 4)), (4.0, 4.0), (0.0, 0.2, 0.4))
    batch = TripletBatch.from_triplets([trip])
    log = BranchLog()
    td, tp = d.tensor(True), p.tensor(True)
    with branch_log(log):
        g = np.concatenate(backward(PAIR.batch_loss(td, tp, batch, LossWeights()), [td, tp]))
    nd = len(d)

    def loss(theta):
        with torch.no_grad(), branch_log(log.replay()):
            return float(PAIR.batch_loss(torch.tensor(theta[:nd]), torch.tensor(theta[nd:]), batch, LossWeights()))

    theta = np.concatenate([d.values, p.values])
    idx = rng.choice(theta.size, 30, replace=False)
    fd = finite_difference_gradient(loss, theta, 1e-5, idx)
    rel = np.abs(g[idx] - fd) / np.maximum(np.abs(g[idx]), np.abs(fd))
    assert rel.max() < 1e-4


def test_replay_reproduces_recorded_loss():
    d, p = PAIR.init_params(4)
    p = jitter_head(p, PAIR.pose, 4)
    batch = TripletBatch.from_triplets([random_triplet(4)])
    log = BranchLog()
    with branch_log(log):
        first = PAIR.batch_loss(d.tensor(), p.tensor(), batch, LossWeights())
    with branch_log(log.replay()):
        again = PAIR.batch_loss(d.tensor(), p.tensor(), batch, LossWeights())
    assert float(first) == float(again)
    with pytest.raises(RuntimeError):
        with branch_log(log.replay()):
            PAIR.batch_loss(d.tensor(), p.tensor(), TripletBatch.from_triplets([random_triplet(4)] * 2), LossWeights())


def test_adam_zero_gradient_leaves_params():
    params = ParamVector(np.arange(4.0), (("w", (4,)),))
    state = AdamState.zeros(4)
    adam_step(params, np.zeros(4), state)
    assert np.array_equal(params.values, np.arange(4.0)) and state.step == 1


@pytest.mark.parametrize("g", [1e-3, 0.5, -2.0, 100.0])
def test_adam_first_step_size(g):
    params = ParamVector(np.zeros(3), (("w", (3,)),))
    state = AdamState.zeros(3, lr=1e-4)
    adam_step(params, np.full(3, g), state)
    expected = 1e-4 * abs(g) / (abs(g) + 1e-8)
    assert np.allclose(np.abs(params.values), expected, rtol=1e-12)
    assert np.all(np.sign(params.values) == -np.sign(g))


def test_adam_is_deterministic():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 6))
    runs = []
    for _ in range(2):
        params = ParamVector(np.ones(6), (("w", (6,)),))
        state = AdamState.zeros(6, lr=1e-2)
        for g in grads:
            adam_step(params, g, state)
        runs.append(params.values.copy())
    assert np.array_equal(*runs)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step(ParamVector(np.zeros(3), (("w", (3,)),)), np.zeros(4), AdamState.zeros(3))


def test_param_vector_validation():
    with pytest.raises(ShapeMismatch):
        ParamVector(np.zeros(5), (("w", (2, 2)),))
    with pytest.raises(ValueError):
        ParamVector(np.zeros(4), (("w", (2, 2)),), frozen=5)


def test_checkpoint_round_trip(tmp_path):
    params = DEPTH.init_params(7).copy(frozen=DEPTH.encoder_size)
    save_params(tmp_path / "d.bin", params, {"net": "depth", "downsample": 4})
    back, arch = load_params(tmp_path / "d.bin")
    assert np.array_equal(back.values, params.values)
    assert back.layout == params.layout and back.frozen == params.frozen
    assert arch == {"net": "depth", "downsample": 4}


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.bin")
