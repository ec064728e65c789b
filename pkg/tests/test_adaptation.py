import json

import numpy as np
import pytest
import torch

from contslam.adaptation import (
    AdaptationConfig,
    DualState,
    NetState,
    ReplayBuffer,
    SceneTooShort,
    adapt_step,
    build_generalizer_batch,
    frame_gate,
    pretrain,
    run_deployment,
    scene_triplet,
)
from contslam.photometric import ImageTriplet, LossWeights, NonFinite
from contslam.simworld import EnvironmentSpec, SceneSpec, generate_scene
from contslam.toynets import NetworkPair, TripletBatch, adam_step, backward, jitter_head

W = LossWeights()


@pytest.fixture(scope="module")
def scenes():
    a = EnvironmentSpec("A", texture_seed=2, frequency=(0.6, 2.4), velocity_noise=0.0)
    b = EnvironmentSpec("B", texture_seed=3, frequency=(0.15, 0.6), velocity_noise=0.0)
    return {
        "a1": generate_scene(a, SceneSpec("a1", seed=1, length=5.0)),
        "a2": generate_scene(a, SceneSpec("a2", seed=2, length=5.0)),
        "b1": generate_scene(b, SceneSpec("b1", seed=3, length=5.0)),
    }


@pytest.fixture(scope="module")
def pair(scenes):
    return NetworkPair.for_camera(scenes["a1"].camera)


@pytest.fixture(scope="module")
def weights(pair):
    d, p = pair.init_params(0)
    return d, jitter_head(p, pair.pose, 0)


def tiny_triplet(env, seed=0):
    rng = np.random.default_rng(seed)
    frames = tuple(rng.uniform(0, 1, (4, 4)) for _ in range(3))
    return ImageTriplet(frames, (1.0, 1.0), (0.0, 0.5, 1.0), env_id=env)


def config(mode, **kw):
    return AdaptationConfig(mode=mode, lr=1e-3, cycles=kw.pop("cycles", 2), **kw)


@pytest.mark.parametrize(
    "v, dt, accept",
    [(0.1, 1.0, False), (1.0, 0.5, True), (0.4, 0.5, True), (0.2, 1.0, True), (0.0, 0.1, False)],
)
def test_frame_gate(v, dt, accept):
    assert frame_gate(v, dt, 0.2) is accept


def test_frame_gate_needs_positive_interval():
    with pytest.raises(ValueError):
        frame_gate(1.0, 0.0, 0.2)


@pytest.mark.parametrize(
    "envs, current, size",
    [((), "A", 1), (("A", "B"), "B", 2), (("A", "B", "C"), "D", 4), (("A",), "A", 1)],
)
def test_generalizer_batch_size(envs, current, size):
    buf = ReplayBuffer(0)
    for k, env in enumerate(envs):
        for j in range(3):
            buf.append(tiny_triplet(env, 10 * k + j))
    batch = build_generalizer_batch(tiny_triplet(current, 99), buf, current)
    assert len(batch) == size
    assert batch[0].env_id == current
    assert all(t.env_id != current for t in batch[1:])


def test_replay_sampling_is_reproducible():
    def positions(seed):
        buf = ReplayBuffer(seed)
        triplets = [tiny_triplet("A", j) for j in range(10)]
        for t in triplets:
            buf.append(t)
        where = {id(t): j for j, t in enumerate(triplets)}
        return [where[id(t)] for _ in range(5) for t in buf.sample("A", 2)]

    assert positions(3) == positions(3)
    assert positions(3) != positions(4)


def test_replay_buffer_positions_and_copy():
    buf = ReplayBuffer(1)
    triplets = [tiny_triplet("A", j) for j in range(4)]
    for t in triplets:
        buf.append(t)
    assert buf.get("A", 2) is triplets[2] and len(buf) == 4 and buf.count("B") == 0
    clone = buf.copy()
    clone.append(tiny_triplet("B"))
    assert len(buf) == 4 and len(clone) == 5
    assert [buf.get("A", int(i)) for i in range(4)] == triplets
    clone = buf.copy()
    assert [t.frames[0][0, 0] for t in buf.sample("A", 6)] == [t.frames[0][0, 0] for t in clone.sample("A", 6)]


@pytest.mark.parametrize("bad", [{"cycles": 0}, {"min_distance": -1.0}, {"mode": "online"}])
def test_adaptation_config_validation(bad):
    with pytest.raises(ValueError):
        AdaptationConfig(**bad)


def test_adapt_step_trace_length(pair, weights, scenes):
    net = NetState.fresh(*weights, lr=1e-3)
    trace = adapt_step(pair, net, [scene_triplet(scenes["a1"], [0, 1, 2])], 5, W)
    assert len(trace) == 5 and all(np.isfinite(trace))


def test_zero_learning_rate_changes_nothing(pair, weights, scenes):
    net = NetState.fresh(*weights, lr=0.0)
    adapt_step(pair, net, [scene_triplet(scenes["a1"], [0, 1, 2])], 3, W)
    assert np.array_equal(net.depth.values, weights[0].values)
    assert np.array_equal(net.pose.values, weights[1].values)


def test_single_cycle_is_one_plain_training_step(pair, weights, scenes):
    trip = scene_triplet(scenes["a1"], [1, 2, 3])
    net = NetState.fresh(*weights, lr=1e-3)
    adapt_step(pair, net, [trip], 1, W)
    manual = NetState.fresh(*weights, lr=1e-3)
    dp, pp = manual.depth.tensor(True), manual.pose.tensor(True)
    gd, gp = backward(pair.batch_loss(dp, pp, TripletBatch.from_triplets([trip]), W), [dp, pp])
    adam_step(manual.depth, gd, manual.depth_opt)
    adam_step(manual.pose, gp, manual.pose_opt)
    assert np.array_equal(net.depth.values, manual.depth.values)
    assert np.array_equal(net.pose.values, manual.pose.values)


def test_frozen_prefix_is_untouched(pair, weights, scenes):
    frozen = (pair.depth.encoder_size, pair.pose.encoder_size)
    net = NetState.fresh(*weights, lr=1e-2, frozen=frozen)
    adapt_step(pair, net, [scene_triplet(scenes["a1"], [0, 1, 2])], 3, W)
    assert np.array_equal(net.depth.values[: frozen[0]], weights[0].values[: frozen[0]])
    assert np.array_equal(net.pose.values[: frozen[1]], weights[1].values[: frozen[1]])
    assert not np.array_equal(net.depth.values, weights[0].values)


def test_non_finite_loss_propagates(pair, weights, scenes):
    trip = scene_triplet(scenes["a1"], [0, 1, 2])
    bad = ImageTriplet((trip.frames[0] * np.nan, trip.frames[1], trip.frames[2]), trip.velocities, trip.timestamps)
    with pytest.raises(NonFinite):
        adapt_step(pair, NetState.fresh(*weights, lr=1e-3), [bad], 1, W)


def test_small_step_rarely_increases_loss(pair, scenes):
    # one cycle at a small learning rate on a fixed triplet, 100 seeded initializations
    batch = TripletBatch.from_triplets([scene_triplet(scenes["a1"], [2, 3, 4])])
    worse = 0
    for trial in range(100):
        d, p = pair.init_params(trial)
        net = NetState.fresh(d, jitter_head(p, pair.pose, trial), lr=1e-5)
        before = adapt_step(pair, net, batch, 1, W)[0]
        with torch.no_grad():
            after = float(pair.batch_loss(net.depth.tensor(), net.pose.tensor(), batch, W))
        worse += after > before
    assert worse <= 10


def test_fixed_mode_keeps_weights_and_uses_them(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    res, new = run_deployment(pair, state, scenes["a1"], config("fixed"), W)
    assert new.stored_depth.checksum() == state.stored_depth.checksum()
    assert new.stored_pose.checksum() == state.stored_pose.checksum()
    assert len(new.buffer) == 0
    scene = scenes["a1"]
    acc = res.accepted
    for k, motion in enumerate(res.odometry):
        ref = pair.predict_motion(weights[1], scene.frame(acc[k]), scene.frame(acc[k + 1]))
        assert np.array_equal(motion.matrix(), ref.matrix())


def test_expert_only_keeps_adapting_without_replay(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    _, s1 = run_deployment(pair, state, scenes["a1"], config("expert_only"), W)
    assert len(s1.buffer) == 0
    assert s1.stored_pose.checksum() == s1.expert.pose.checksum()
    assert s1.stored_pose.checksum() != state.stored_pose.checksum()


def test_general_only_fills_the_buffer(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    r1, s1 = run_deployment(pair, state, scenes["a1"], config("general_only"), W)
    r2, s2 = run_deployment(pair, s1, scenes["b1"], config("general_only"), W)
    assert s2.buffer.count("A") == len(r1.accepted) - 2
    assert s2.buffer.count("B") == len(r2.accepted) - 2
    assert s2.stored_pose.checksum() == s2.generalizer.pose.checksum()


def test_cl_slam_hand_off(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    _, s1 = run_deployment(pair, state, scenes["a1"], config("cl_slam"), W)
    assert np.array_equal(s1.stored_depth.values, s1.generalizer.depth.values)
    assert np.array_equal(s1.stored_pose.values, s1.generalizer.pose.values)
    # nothing foreign to replay yet, so both networks saw the same batches
    assert s1.expert.pose.checksum() == s1.generalizer.pose.checksum()
    # the next deployment's expert starts from the stored weights: same first prediction
    img0, img1 = scenes["b1"].frame(0), scenes["b1"].frame(1)
    expert = NetState.fresh(s1.stored_depth, s1.stored_pose, 1e-3)
    a = pair.predict_motion(expert.pose, img0, img1).matrix()
    b = pair.predict_motion(s1.generalizer.pose, img0, img1).matrix()
    assert np.array_equal(a, b)
    _, s2 = run_deployment(pair, s1, scenes["b1"], config("cl_slam"), W)
    assert s2.stored_pose.checksum() == s2.generalizer.pose.checksum()
    # replayed A-triplets now separate the generalizer from the expert
    assert s2.expert.pose.checksum() != s2.generalizer.pose.checksum()


def test_first_deployment_matches_expert_only(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    cl, _ = run_deployment(pair, state, scenes["a1"], config("cl_slam"), W)
    ex, _ = run_deployment(pair, state, scenes["a1"], config("expert_only"), W)
    assert [m.matrix().tobytes() for m in cl.odometry] == [m.matrix().tobytes() for m in ex.odometry]


def test_replay_grows_with_accepted_frames(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    total = 0
    for sid in ("a1", "b1", "a2"):
        res, state = run_deployment(pair, state, scenes[sid], config("cl_slam", cycles=1), W)
        total += len(res.accepted) - 2
        assert len(state.buffer) == total


def test_deployment_does_not_mutate_input_and_is_deterministic(pair, weights, scenes):
    state = DualState.initial(*weights, seed=5)
    before = state.checksum()
    r1, s1 = run_deployment(pair, state, scenes["a1"], config("cl_slam"), W)
    r2, s2 = run_deployment(pair, state, scenes["a1"], config("cl_slam"), W)
    assert state.checksum() == before and len(state.buffer) == 0
    assert json.dumps(r1.log) == json.dumps(r2.log)
    assert s1.checksum() == s2.checksum()


def test_deployment_log_and_odometry_shape(pair, weights, scenes):
    scene = scenes["a1"]
    res, _ = run_deployment(pair, DualState.initial(*weights), scene, config("cl_slam", cycles=3), W)
    assert len(res.log) == len(scene)
    assert len(res.odometry) == len(res.accepted) - 1
    adapted = [r for r in res.log if "odometry" in r]
    assert len(adapted) == len(res.accepted) - 2
    assert all(len(r["expert_loss"]) == 3 and len(r["generalizer_loss"]) == 3 for r in adapted)
    assert all(len(r["odometry"].split()) == 12 for r in adapted)
    json.dumps(res.log)
    traj = res.trajectory(scene.timestamps)
    assert len(traj) == len(res.accepted)


def test_on_frame_sees_every_accepted_frame(pair, weights, scenes):
    seen = []
    res, _ = run_deployment(
        pair, DualState.initial(*weights), scenes["a1"], config("cl_slam", cycles=1), W,
        on_frame=lambda i, img, motion, params: seen.append((i, motion is None)),
    )
    assert [i for i, _ in seen] == res.accepted
    assert [none for _, none in seen] == [True] + [False] * (len(res.accepted) - 1)


def test_offline_predicts_with_stored_weights_then_trains(pair, weights, scenes):
    state = DualState.initial(*weights, seed=0)
    off, s_off = run_deployment(pair, state, scenes["a1"], config("offline"), W)
    fixed, _ = run_deployment(pair, state, scenes["a1"], config("fixed"), W)
    assert [m.matrix().tobytes() for m in off.odometry] == [m.matrix().tobytes() for m in fixed.odometry]
    assert s_off.stored_pose.checksum() != state.stored_pose.checksum()
    assert len(s_off.buffer) == len(off.accepted) - 2


def test_scene_too_short(pair, weights, scenes):
    with pytest.raises(SceneTooShort):
        run_deployment(pair, DualState.initial(*weights), scenes["a1"], config("cl_slam", min_distance=1e6), W)


def test_gated_triplets_use_travelled_distance(scenes):
    scene = scenes["a1"]
    trip = scene_triplet(scene, [0, 2, 5])
    d01, d12 = trip.distances()
    assert d01 == pytest.approx(np.sum(scene.velocities[1:3] * np.diff(scene.timestamps[0:3])))
    assert d12 == pytest.approx(np.sum(scene.velocities[3:6] * np.diff(scene.timestamps[2:6])))


def test_pretraining_moves_weights_deterministically(pair, scenes):
    d, p = pair.init_params(0)
    a = pretrain(pair, d, p, [scenes["a1"]], epochs=1, lr=1e-3, batch_size=4, seed=1)
    b = pretrain(pair, d, p, [scenes["a1"]], epochs=1, lr=1e-3, batch_size=4, seed=1)
    assert a[0].checksum() == b[0].checksum() and a[1].checksum() == b[1].checksum()
    assert a[1].checksum() != p.checksum() and a[0].frozen == 0
    xi = pair.predict_motion(a[1], scenes["a1"].frame(0), scenes["a1"].frame(1))
    assert np.linalg.norm(xi.translation) > 0
