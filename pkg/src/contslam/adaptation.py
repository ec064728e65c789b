"""Dual-network online adaptation (expert + generalizer) and the baseline modes.

Per accepted frame the expert takes ``c`` update cycles on the online triplet alone
while the generalizer takes ``c`` cycles on the online triplet plus one replayed
triplet from every other environment seen so far. Odometry is emitted by the expert.
When a deployment ends the generalizer weights become the stored weights that seed
the next deployment, and the expert is discarded.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .geometry import Pose3, Trajectory, compose, format_pose_row
from .photometric import ImageTriplet, LossWeights, NonFinite
from .simworld import RenderedScene
from .toynets import AdamState, NetworkPair, ParamVector, TripletBatch, adam_step, backward, jitter_head

MODES = ("cl_slam", "fixed", "expert_only", "general_only", "offline")


class SceneTooShort(RuntimeError):
    pass


@dataclass(frozen=True)
class AdaptationConfig:
    cycles: int = 5
    lr: float = 1e-4
    min_distance: float = 0.2
    mode: str = "cl_slam"
    replay_per_env: int = 1
    freeze_encoders: bool = True

    def __post_init__(self):
        if self.cycles < 1:
            raise ValueError("at least one update cycle is required")
        if self.min_distance < 0:
            raise ValueError("minimum distance must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.replay_per_env < 0:
            raise ValueError("replay count must be nonnegative")


class ReplayBuffer:
    """Unbounded, append-only store of triplets keyed by environment."""

    def __init__(self, seed: int = 0):
        self._entries: dict[str, list[ImageTriplet]] = {}
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return sum(len(v) for v in self._entries.values())

    @property
    def environments(self) -> list[str]:
        return sorted(self._entries)

    def append(self, triplet: ImageTriplet) -> None:
        self._entries.setdefault(triplet.env_id, []).append(triplet)

    def get(self, env_id: str, position: int) -> ImageTriplet:
        return self._entries[env_id][position]

    def count(self, env_id: str) -> int:
        return len(self._entries.get(env_id, ()))

    def sample(self, env_id: str, k: int = 1) -> list[ImageTriplet]:
        pool = self._entries[env_id]
        return [pool[int(i)] for i in self.rng.integers(0, len(pool), size=k)]

    def copy(self) -> ReplayBuffer:
        other = ReplayBuffer()
        other._entries = {k: list(v) for k, v in self._entries.items()}
        other.rng = copy.deepcopy(self.rng)
        return other


@dataclass
class NetState:
    depth: ParamVector
    pose: ParamVector
    depth_opt: AdamState
    pose_opt: AdamState

    @classmethod
    def fresh(cls, depth: ParamVector, pose: ParamVector, lr: float, frozen: tuple[int, int] = (0, 0)) -> NetState:
        return cls(
            depth.copy(frozen=frozen[0]),
            pose.copy(frozen=frozen[1]),
            AdamState.zeros(len(depth), lr),
            AdamState.zeros(len(pose), lr),
        )

    def copy(self) -> NetState:
        return NetState(self.depth.copy(), self.pose.copy(), self.depth_opt.copy(), self.pose_opt.copy())

    def checksum(self) -> str:
        return self.depth.checksum()[:16] + self.pose.checksum()[:16]


@dataclass
class DualState:
    stored_depth: ParamVector
    stored_pose: ParamVector
    buffer: ReplayBuffer
    expert: NetState | None = None
    generalizer: NetState | None = None

    @classmethod
    def initial(cls, depth: ParamVector, pose: ParamVector, seed: int = 0) -> DualState:
        return cls(depth.copy(frozen=0), pose.copy(frozen=0), ReplayBuffer(seed))

    def copy(self) -> DualState:
        return DualState(
            self.stored_depth.copy(),
            self.stored_pose.copy(),
            self.buffer.copy(),
            None if self.expert is None else self.expert.copy(),
            None if self.generalizer is None else self.generalizer.copy(),
        )

    def checksum(self) -> str:
        return self.stored_depth.checksum()[:16] + self.stored_pose.checksum()[:16]


def frame_gate(velocity: float, dt: float, min_distance: float) -> bool:
    """Accept a frame once the travelled distance reaches ``min_distance`` (inclusive)."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    return abs(velocity) * dt >= min_distance


def build_generalizer_batch(
    online: ImageTriplet, buffer: ReplayBuffer, current_env: str, per_env: int = 1
) -> list[ImageTriplet]:
    batch = [online]
    for env in buffer.environments:
        if env != current_env and buffer.count(env):
            batch.extend(buffer.sample(env, per_env))
    return batch


def adapt_step(
    pair: NetworkPair,
    net: NetState,
    batch: Sequence[ImageTriplet] | TripletBatch,
    cycles: int,
    weights: LossWeights,
) -> list[float]:
    """Run ``cycles`` forward/backward/Adam updates on the mean batch loss (in place)."""
    if cycles < 1:
        raise ValueError("at least one update cycle is required")
    if not isinstance(batch, TripletBatch):
        if len(batch) == 0:
            raise ValueError("empty batch")
        batch = TripletBatch.from_triplets(batch)
    trace = []
    for _ in range(cycles):
        dp = net.depth.tensor(requires_grad=True)
        pp = net.pose.tensor(requires_grad=True)
        loss = pair.batch_loss(dp, pp, batch, weights)
        if not torch.isfinite(loss):
            raise NonFinite(f"loss became {loss.item()}")
        gd, gp = backward(loss, [dp, pp], [net.depth.frozen, net.pose.frozen])
        adam_step(net.depth, gd, net.depth_opt)
        adam_step(net.pose, gp, net.pose_opt)
        trace.append(float(loss.detach()))
    return trace


# --- deployment -------------------------------------------------------------------------------


@dataclass
class DeploymentResult:
    env_id: str
    scene_id: str
    accepted: list[int]
    odometry: list[Pose3]  # relative motion between consecutive accepted frames
    log: list[dict] = field(default_factory=list)
    runtime: float = 0.0

    def trajectory(self, timestamps: np.ndarray) -> Trajectory:
        return Trajectory.from_relative(timestamps[self.accepted], self.odometry)


def scene_triplet(scene: RenderedScene, frames: Sequence[int], cache: dict | None = None) -> ImageTriplet:
    """Triplet from three accepted frame indices, velocities averaged over skipped frames."""
    imgs = []
    for i in frames:
        if cache is not None:
            if i not in cache:
                cache[i] = scene.frame(i)
            imgs.append(cache[i])
        else:
            imgs.append(scene.frame(i))
    ts = scene.timestamps
    vel = []
    for a, b in zip(frames[:-1], frames[1:]):
        dist = float(np.sum(scene.velocities[a + 1 : b + 1] * np.diff(ts[a : b + 1])))
        vel.append(dist / (ts[b] - ts[a]))
    return ImageTriplet(tuple(imgs), tuple(vel), tuple(float(ts[i]) for i in frames), scene.env_id, scene.scene_id, frames[-1])


def _frozen(pair: NetworkPair, config: AdaptationConfig) -> tuple[int, int]:
    if not config.freeze_encoders:
        return (0, 0)
    return (pair.depth.encoder_size, pair.pose.encoder_size)


def run_deployment(
    pair: NetworkPair,
    state: DualState,
    scene: RenderedScene,
    config: AdaptationConfig,
    weights: LossWeights = LossWeights(),
    on_frame: Callable[[int, np.ndarray, Pose3 | None, ParamVector], None] | None = None,
) -> tuple[DeploymentResult, DualState]:
    """Deploy on one scene; returns the expert's odometry and the updated state.

    ``state`` is not modified. ``on_frame`` receives (frame index, image, motion from
    the previous accepted frame, current pose parameters) for every accepted frame once
    its odometry is known; the motion is None for the first frame.
    """
    started = time.perf_counter()
    state = state.copy()
    mode = config.mode
    frozen = _frozen(pair, config)
    # which weights adapt and which one emits odometry
    expert = generalizer = None
    if mode == "cl_slam":
        expert = NetState.fresh(state.stored_depth, state.stored_pose, config.lr, frozen)
        generalizer = NetState.fresh(state.stored_depth, state.stored_pose, config.lr, frozen)
    elif mode == "expert_only":
        expert = NetState.fresh(state.stored_depth, state.stored_pose, config.lr, frozen)
    elif mode == "general_only":
        generalizer = NetState.fresh(state.stored_depth, state.stored_pose, config.lr, frozen)
    emitter = expert or generalizer
    result = DeploymentResult(scene.env_id, scene.scene_id, [], [])
    cache: dict[int, np.ndarray] = {}
    collected: list[ImageTriplet] = []

    def pose_params() -> ParamVector:
        return emitter.pose if emitter is not None else state.stored_pose

    last = None
    travelled = 0.0
    for i in range(len(scene)):
        if last is None:
            accept = True
        else:
            dt = scene.timestamps[i] - scene.timestamps[last]
            travelled = float(np.sum(scene.velocities[last + 1 : i + 1] * np.diff(scene.timestamps[last : i + 1])))
            accept = frame_gate(travelled / dt, dt, config.min_distance)
        record = {"frame": i, "accepted": bool(accept)}
        if not accept:
            result.log.append(record)
            continue
        result.accepted.append(i)
        last = i
        if len(result.accepted) < 3:
            result.log.append(record)
            continue
        triplet = scene_triplet(scene, result.accepted[-3:], cache)
        if expert is not None:
            record["expert_loss"] = adapt_step(pair, expert, [triplet], config.cycles, weights)
        if generalizer is not None:
            batch = build_generalizer_batch(triplet, state.buffer, scene.env_id, config.replay_per_env)
            record["generalizer_loss"] = adapt_step(pair, generalizer, batch, config.cycles, weights)
        if mode in ("cl_slam", "general_only", "offline"):
            state.buffer.append(triplet)
        collected.append(triplet)
        frames = result.accepted[-3:]
        params = pose_params()
        if len(result.accepted) == 3:
            first = pair.predict_motion(params, triplet.frames[0], triplet.frames[1])
            result.odometry.append(first)
            if on_frame is not None:
                on_frame(frames[0], triplet.frames[0], None, params)
                on_frame(frames[1], triplet.frames[1], first, params)
        motion = pair.predict_motion(params, triplet.frames[1], triplet.frames[2])
        result.odometry.append(motion)
        record["odometry"] = format_pose_row(motion)
        result.log.append(record)
        if on_frame is not None:
            on_frame(frames[2], triplet.frames[2], motion, params)
        # release images that can no longer be part of a triplet
        for k in list(cache):
            if k < frames[1]:
                del cache[k]
    if len(result.accepted) < 3:
        raise SceneTooShort(f"scene {scene.scene_id} has only {len(result.accepted)} accepted frames")

    if mode == "cl_slam":
        state.stored_depth = generalizer.depth.copy(frozen=0)
        state.stored_pose = generalizer.pose.copy(frozen=0)
    elif mode == "expert_only":
        state.stored_depth = expert.depth.copy(frozen=0)
        state.stored_pose = expert.pose.copy(frozen=0)
    elif mode == "general_only":
        state.stored_depth = generalizer.depth.copy(frozen=0)
        state.stored_pose = generalizer.pose.copy(frozen=0)
    elif mode == "offline":
        learner = NetState.fresh(state.stored_depth, state.stored_pose, config.lr, frozen)
        buffer = state.buffer
        for trip in collected:
            batch = build_generalizer_batch(trip, buffer, scene.env_id, config.replay_per_env)
            adapt_step(pair, learner, batch, config.cycles, weights)
        state.stored_depth = learner.depth.copy(frozen=0)
        state.stored_pose = learner.pose.copy(frozen=0)
    state.expert = expert
    state.generalizer = generalizer
    result.runtime = time.perf_counter() - started
    return result, state


def pretrain(
    pair: NetworkPair,
    depth: ParamVector,
    pose: ParamVector,
    scenes: Sequence[RenderedScene],
    epochs: int,
    lr: float,
    weights: LossWeights = LossWeights(),
    batch_size: int = 4,
    seed: int = 0,
    min_distance: float = 0.2,
    log: Callable[[int, float], None] | None = None,
) -> tuple[ParamVector, ParamVector]:
    """Self-supervised training of all layers on the pre-training scenes.

    Starts by nudging the pose head off zero (see ``jitter_head``).
    """
    pose = jitter_head(pose, pair.pose, int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]))
    net = NetState.fresh(depth, pose, lr)
    triplets = []
    for scene in scenes:
        accepted = []
        last = None
        for i in range(len(scene)):
            if last is not None:
                dt = scene.timestamps[i] - scene.timestamps[last]
                dist = float(np.sum(scene.velocities[last + 1 : i + 1] * np.diff(scene.timestamps[last : i + 1])))
                if not frame_gate(dist / dt, dt, min_distance):
                    continue
            accepted.append(i)
            last = i
        for k in range(2, len(accepted)):
            triplets.append(scene_triplet(scene, accepted[k - 2 : k + 1]))
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(len(triplets))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [triplets[j] for j in order[start : start + batch_size]]
            losses.extend(adapt_step(pair, net, batch, 1, weights))
        if log is not None:
            log(epoch, float(np.mean(losses)))
    return net.depth.copy(frozen=0), net.pose.copy(frozen=0)
