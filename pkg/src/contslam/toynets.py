"""Desk-scale DepthNet / PoseNet, flat parameter vectors, Adam, gradient checks.

Both networks are pure functions of a flat float64 parameter vector, so expert and
generalizer copies are just separate :class:`ParamVector` instances. The first
(encoder) layer of each network forms the frozen prefix used during adaptation.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import CameraIntrinsics, Pose3, Twist, se3_exp_torch, invert_matrix_torch
from .photometric import (
    DimensionMismatch,
    ImageTriplet,
    LossWeights,
    as_tensor,
    reprojection_loss,
    smoothness_loss,
    velocity_loss,
    warp_image,
)

MIN_DISPARITY = 1e-4
MAX_DISPARITY = 10.0  # minimum predictable depth of 0.1 m


class GraphNotRecorded(RuntimeError):
    pass


class ShapeMismatch(ValueError):
    pass


Layout = tuple  # tuple of (name, shape) pairs


def layout_size(layout: Layout) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout
    frozen: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != layout_size(self.layout):
            raise ShapeMismatch(f"{self.values.size} values for a layout of {layout_size(self.layout)}")
        if not 0 <= self.frozen <= self.values.size:
            raise ValueError("frozen prefix longer than the parameter vector")

    def __len__(self):
        return self.values.size

    def copy(self, frozen: int | None = None) -> ParamVector:
        return ParamVector(self.values.copy(), self.layout, self.frozen if frozen is None else frozen)

    def checksum(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def tensor(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float64, requires_grad=requires_grad)


def unpack(flat: torch.Tensor, layout: Layout) -> dict[str, torch.Tensor]:
    out = {}
    offset = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = flat[offset : offset + n].reshape(shape)
        offset += n
    return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _prep(images: torch.Tensor, factor: int) -> torch.Tensor:
    x = images[:, None] if images.dim() == 3 else images
    return F.avg_pool2d(x, factor) - 0.5


@dataclass(frozen=True)
class DepthNetToy:
    """Encoder-decoder in miniature: two strided convs, two upsampling convs, one skip."""

    height: int = 48
    width: int = 96
    downsample: int = 4
    widths: tuple = (8, 16)
    init_depth: float = 10.0

    def __post_init__(self):
        f = self.downsample * 4
        if self.height % f or self.width % f:
            raise ValueError(f"image dimensions must be divisible by {f}")

    @property
    def low_res(self) -> tuple[int, int]:
        return self.height // self.downsample, self.width // self.downsample

    @property
    def layout(self) -> Layout:
        w1, w2 = self.widths
        h, w = self.low_res
        return (
            ("enc1.w", (w1, 1, 3, 3)),
            ("enc1.b", (w1,)),
            ("enc2.w", (w2, w1, 3, 3)),
            ("enc2.b", (w2,)),
            ("dec1.w", (w1, w2, 3, 3)),
            ("dec1.b", (w1,)),
            ("dec2.w", (1, 2 * w1, 3, 3)),
            ("dec2.b", (1,)),
            ("prior", (h, w)),
        )

    @property
    def encoder_size(self) -> int:
        return layout_size(self.layout[:2])

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in self.layout:
            if name.endswith(".w"):
                parts.append(_uniform(rng, shape, int(np.prod(shape[1:]))))
            else:
                parts.append(np.zeros(shape))
        p = ParamVector(np.concatenate([x.reshape(-1) for x in parts]), self.layout)
        target = (1.0 / self.init_depth - MIN_DISPARITY) / (MAX_DISPARITY - MIN_DISPARITY)
        views = unpack(torch.from_numpy(p.values), self.layout)
        views["dec2.b"][0] = math.log(target / (1.0 - target))
        return p

    def forward(self, images: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        """(B, H, W) images -> (B, H, W) disparity."""
        if tuple(images.shape[-2:]) != (self.height, self.width):
            raise DimensionMismatch(f"DepthNet expects {self.height}x{self.width}, got {tuple(images.shape[-2:])}")
        p = unpack(params, self.layout)
        x = _prep(images, self.downsample)
        e1 = torch.tanh(F.conv2d(x, p["enc1.w"], p["enc1.b"], stride=2, padding=1))
        e2 = torch.tanh(F.conv2d(e1, p["enc2.w"], p["enc2.b"], stride=2, padding=1))
        d1 = F.interpolate(e2, scale_factor=2, mode="nearest")
        d1 = torch.tanh(F.conv2d(d1, p["dec1.w"], p["dec1.b"], padding=1))
        d2 = F.interpolate(torch.cat([d1, e1], 1), scale_factor=2, mode="nearest")
        raw = F.conv2d(d2, p["dec2.w"], p["dec2.b"], padding=1) + p["prior"]
        raw = F.interpolate(raw, size=(self.height, self.width), mode="bilinear", align_corners=False)
        return MIN_DISPARITY + torch.sigmoid(raw[:, 0]) * (MAX_DISPARITY - MIN_DISPARITY)


@dataclass(frozen=True)
class PoseNetToy:
    """Shared two-layer stem on the stacked image pair plus a linear twist head."""

    height: int = 48
    width: int = 96
    downsample: int = 4
    widths: tuple = (8, 16)
    rotation_scale: float = 0.01
    translation_scale: float = 0.1

    @property
    def feature_size(self) -> int:
        h = self.height // self.downsample // 4
        w = self.width // self.downsample // 4
        return self.widths[1] * h * w

    @property
    def layout(self) -> Layout:
        w1, w2 = self.widths
        return (
            ("stem1.w", (w1, 2, 3, 3)),
            ("stem1.b", (w1,)),
            ("stem2.w", (w2, w1, 3, 3)),
            ("stem2.b", (w2,)),
            ("head.w", (6, self.feature_size)),
            ("head.b", (6,)),
        )

    @property
    def encoder_size(self) -> int:
        return layout_size(self.layout[:2])

    def init_params(self, seed: int) -> ParamVector:
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in self.layout:
            if name.startswith("head") or name.endswith(".b"):
                parts.append(np.zeros(shape))
            else:
                parts.append(_uniform(rng, shape, int(np.prod(shape[1:]))))
        return ParamVector(np.concatenate([x.reshape(-1) for x in parts]), self.layout)

    def forward(self, first: torch.Tensor, second: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
        """(B, H, W) pairs -> (B, 6) twists (rotation, translation) for first -> second."""
        if first.shape != second.shape:
            raise DimensionMismatch(f"{tuple(first.shape)} vs {tuple(second.shape)}")
        if tuple(first.shape[-2:]) != (self.height, self.width):
            raise DimensionMismatch(f"PoseNet expects {self.height}x{self.width}, got {tuple(first.shape[-2:])}")
        p = unpack(params, self.layout)
        x = torch.cat([_prep(first, self.downsample), _prep(second, self.downsample)], 1)
        x = torch.tanh(F.conv2d(x, p["stem1.w"], p["stem1.b"], stride=2, padding=1))
        x = torch.tanh(F.conv2d(x, p["stem2.w"], p["stem2.b"], stride=2, padding=1))
        raw = x.flatten(1) @ p["head.w"].T + p["head.b"]
        scale = torch.tensor([self.rotation_scale] * 3 + [self.translation_scale] * 3, dtype=torch.float64)
        return raw * scale


def jitter_head(params: ParamVector, net: PoseNetToy, seed: int, scale: float = 0.1) -> ParamVector:
    """Copy of ``params`` with small random head weights.

    A zero head predicts exact identity motion, where every pixel is auto-masked and
    the translation norm has no gradient, so training must start from a nudged head.
    """
    out = params.copy()
    rng = np.random.default_rng(seed)
    offset = 0
    for name, shape in net.layout:
        n = int(np.prod(shape))
        if name == "head.w":
            out.values[offset : offset + n] = scale * _uniform(rng, shape, shape[1]).reshape(-1)
        offset += n
    return out


def depth_forward(image, params: ParamVector, net: DepthNetToy) -> torch.Tensor:
    img = as_tensor(image)
    squeeze = img.dim() == 2
    with torch.no_grad():
        out = net.forward(img[None] if squeeze else img, params.tensor())
    return out[0] if squeeze else out


def pose_forward(first, second, params: ParamVector, net: PoseNetToy) -> Twist:
    a, b = as_tensor(first), as_tensor(second)
    with torch.no_grad():
        xi = net.forward(a[None], b[None], params.tensor())[0]
    return Twist.from_vector(xi.numpy())


# --- gradients ----------------------------------------------------------------


def backward(loss: torch.Tensor, leaves: Sequence[torch.Tensor], frozen: Sequence[int] = ()) -> list[np.ndarray]:
    """Reverse-mode gradient of a scalar loss; frozen prefixes are zeroed."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise GraphNotRecorded("loss was not computed from parameters that require gradients")
    grads = torch.autograd.grad(loss, list(leaves), allow_unused=True)
    out = []
    for i, (leaf, g) in enumerate(zip(leaves, grads)):
        g = np.zeros(leaf.shape) if g is None else g.detach().numpy().copy()
        n = frozen[i] if i < len(frozen) else 0
        g[:n] = 0.0
        out.append(g)
    return out


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5, indices=None
) -> np.ndarray:
    """Central differences; with ``indices`` only those entries are evaluated (in order)."""
    if h <= 0:
        raise ValueError("step must be positive")
    theta = np.array(params, dtype=np.float64)
    idx = range(theta.size) if indices is None else indices
    out = []
    for i in idx:
        orig = theta[i]
        theta[i] = orig + h
        up = float(loss_fn(theta))
        theta[i] = orig - h
        down = float(loss_fn(theta))
        theta[i] = orig
        out.append((up - down) / (2 * h))
    return np.array(out)


# --- Adam ------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-4, **kw) -> AdamState:
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState) -> ParamVector:
    """Bias-corrected Adam update; mutates ``params`` and ``state`` and returns ``params``."""
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ShapeMismatch(f"gradient {g.shape}, params {params.values.shape}, state {state.m.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    params.values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# --- the VO pair and its loss ------------------------------------------------------------


@dataclass
class TripletBatch:
    frames: torch.Tensor  # (B, 3, H, W)
    distances: torch.Tensor  # (B, 2) travelled distance for (t-2 -> t-1), (t-1 -> t)

    @classmethod
    def from_triplets(cls, triplets: Sequence[ImageTriplet]) -> TripletBatch:
        frames = torch.from_numpy(np.stack([np.stack(t.frames) for t in triplets]).astype(np.float64))
        dist = torch.tensor([t.distances() for t in triplets], dtype=torch.float64)
        return cls(frames, dist)

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class NetworkPair:
    depth: DepthNetToy
    pose: PoseNetToy
    camera: CameraIntrinsics

    @classmethod
    def for_camera(cls, K: CameraIntrinsics, **kw) -> NetworkPair:
        return cls(DepthNetToy(K.height, K.width, **kw), PoseNetToy(K.height, K.width, **kw), K)

    def init_params(self, seed: int) -> tuple[ParamVector, ParamVector]:
        ss = np.random.SeedSequence(seed).spawn(2)
        return (
            self.depth.init_params(int(ss[0].generate_state(1)[0])),
            self.pose.init_params(int(ss[1].generate_state(1)[0])),
        )

    def triplet_losses(
        self, depth_params: torch.Tensor, pose_params: torch.Tensor, batch: TripletBatch, weights: LossWeights
    ) -> dict[str, torch.Tensor]:
        """Per-triplet loss terms for target frame t-1 with sources t-2 and t."""
        prev, mid, last = batch.frames[:, 0], batch.frames[:, 1], batch.frames[:, 2]
        B = prev.shape[0]
        disparity = self.depth.forward(mid, depth_params)
        depth = 1.0 / disparity
        twists = self.pose.forward(torch.cat([prev, mid]), torch.cat([mid, last]), pose_params)
        motion = se3_exp_torch(twists)
        m01, m12 = motion[:B], motion[B:]
        w0, v0 = warp_image(prev, depth, m01, self.camera)
        w2, v2 = warp_image(last, depth, invert_matrix_torch(m12), self.camera)
        l_pr, _ = reprojection_loss(
            mid, [prev, last], [w0, w2], weights.alpha, valid=[v0, v2], c1=weights.c1, c2=weights.c2
        )
        l_sm = smoothness_loss(disparity, mid)
        l_vel = velocity_loss([m01, m12], [batch.distances[:, 0], batch.distances[:, 1]], [1.0, 1.0])
        total = l_pr + weights.smoothness * l_sm + weights.velocity * l_vel
        return {"reprojection": l_pr, "smoothness": l_sm, "velocity": l_vel, "total": total}

    def batch_loss(
        self, depth_params: torch.Tensor, pose_params: torch.Tensor, batch: TripletBatch, weights: LossWeights
    ) -> torch.Tensor:
        return self.triplet_losses(depth_params, pose_params, batch, weights)["total"].mean()

    def predict_motion(self, pose_params: ParamVector, first, second) -> Pose3:
        """Relative pose of ``second`` in the frame of ``first``."""
        a = as_tensor(first)[None]
        b = as_tensor(second)[None]
        with torch.no_grad():
            T = se3_exp_torch(self.pose.forward(a, b, pose_params.tensor()))[0].numpy()
        return Pose3.from_matrix(T)

    def predict_depth(self, depth_params: ParamVector, image) -> np.ndarray:
        return 1.0 / depth_forward(image, depth_params, self.depth).numpy()


# --- checkpoints ------------------------------------------------------------------------------

_MAGIC = b"CSLPARAM"


def save_params(path, params: ParamVector, arch: dict) -> None:
    """Header (magic, JSON architecture + layout, counts) then little-endian float64 values."""
    header = json.dumps(
        {"arch": arch, "layout": [[n, list(s)] for n, s in params.layout], "count": len(params), "frozen": params.frozen},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(params.values.astype("<f8").tobytes())


def load_params(path) -> tuple[ParamVector, dict]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n))
        values = np.frombuffer(f.read(), dtype="<f8").astype(np.float64)
    if values.size != header["count"]:
        raise ValueError(f"{path}: expected {header['count']} values, found {values.size}")
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    return ParamVector(values, layout, header["frozen"]), header["arch"]
