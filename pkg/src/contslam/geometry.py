"""SE(3) poses, twists, pinhole projection and trajectories.

Poses follow the "pose of b expressed in frame a" convention: ``X_a = T_ab X_b``.
A camera's world pose ``G`` maps camera coordinates to world coordinates, and the
relative motion between two frames is ``inverse(G_a) @ G_b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

SMALL_ANGLE = 1e-8
# below this the closed forms with 1 - cos and t - sin lose digits; series error is ~t^8
SERIES_ANGLE = 1e-3


class GeometryError(ValueError):
    pass


class AngleNearPi(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class NonPositiveDepth(GeometryError):
    pass


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform stored as a unit quaternion (w, x, y, z) and a translation."""

    quaternion: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0 or not np.all(np.isfinite(t)):
            raise GeometryError("pose must have a finite, nonzero quaternion and finite translation")
        q = q / n
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose3:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> Pose3:
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> Pose3:
        return cls(matrix_to_quat(np.asarray(R, dtype=float)), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quaternion)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose3:
        q = self.quaternion * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose3(q, -quat_to_matrix(q) @ self.translation)

    def transform(self, points) -> np.ndarray:
        """Apply to an (..., 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: Pose3) -> Pose3:
        return compose(self, other)

    def __repr__(self):
        return f"Pose3(q={np.round(self.quaternion, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Twist:
    """Tangent vector: rotation (axis-angle, radians) and translation part (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.rotation, dtype=float).reshape(3)
        v = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise GeometryError("twist entries must be finite")
        object.__setattr__(self, "rotation", w)
        object.__setattr__(self, "translation", v)

    @classmethod
    def from_vector(cls, xi) -> Twist:
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])


def compose(a: Pose3, b: Pose3) -> Pose3:
    q = _quat_mul(a.quaternion, b.quaternion)
    return Pose3(q, a.rotation @ b.translation + a.translation)


def inverse(T: Pose3) -> Pose3:
    return T.inverse()


def relative(a: Pose3, b: Pose3) -> Pose3:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(a.inverse(), b)


def _v_coefficients(theta: float) -> tuple[float, float, float]:
    """Returns (sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3)."""
    if theta < SERIES_ANGLE:
        t2 = theta * theta
        return (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / theta**2, (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _v_coefficients(theta)
    W = skew(omega)
    return np.eye(3) + a * W + b * (W @ W)


def se3_exp(xi: Twist) -> Pose3:
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    omega, rho = xi.rotation, xi.translation
    theta = float(np.linalg.norm(omega))
    half = 0.5 * theta
    if theta < SMALL_ANGLE:
        q = np.concatenate([[1.0 - theta**2 / 8.0], omega * (0.5 - theta**2 / 48.0)])
    else:
        q = np.concatenate([[math.cos(half)], omega * (math.sin(half) / theta)])
    _, b, c = _v_coefficients(theta)
    W = skew(omega)
    V = np.eye(3) + b * W + c * (W @ W)
    return Pose3(q, V @ rho)


def se3_log(T: Pose3) -> Twist:
    q = T.quaternion
    w = min(1.0, float(q[0]))
    vnorm = float(np.linalg.norm(q[1:]))
    theta = 2.0 * math.atan2(vnorm, w)
    if theta >= math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi for a unique log")
    if theta < SMALL_ANGLE:
        omega = q[1:] * (2.0 + theta**2 / 12.0)
    else:
        omega = q[1:] * (theta / vnorm)
    W = skew(omega)
    if theta < SERIES_ANGLE:
        k = 1.0 / 12.0 + theta**2 / 720.0 + theta**4 / 30240.0
    else:
        k = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    V_inv = np.eye(3) - 0.5 * W + k * (W @ W)
    return Twist(omega, V_inv @ T.translation)


def rotation_angle(T: Pose3) -> float:
    q = T.quaternion
    return 2.0 * math.atan2(float(np.linalg.norm(q[1:])), abs(float(q[0])))


def se3_exp_torch(xi: torch.Tensor) -> torch.Tensor:
    """Differentiable batched exponential: (..., 6) twists -> (..., 4, 4) matrices."""
    omega, rho = xi[..., :3], xi[..., 3:]
    theta2 = (omega * omega).sum(-1, keepdim=True)
    small = theta2 < SERIES_ANGLE**2
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    t4 = theta2 * theta2
    a = torch.where(small, 1.0 - theta2 / 6.0 + t4 / 120.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0 + t4 / 720.0, (1.0 - torch.cos(theta)) / theta2_safe)
    c = torch.where(
        small, 1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0, (theta - torch.sin(theta)) / (theta2_safe * theta)
    )
    zero = torch.zeros_like(omega[..., 0])
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    W = torch.stack(
        [
            torch.stack([zero, -wz, wy], -1),
            torch.stack([wz, zero, -wx], -1),
            torch.stack([-wy, wx, zero], -1),
        ],
        -2,
    )
    W2 = W @ W
    eye = torch.eye(3, dtype=xi.dtype).expand(W.shape)
    a, b, c = a[..., None], b[..., None], c[..., None]
    R = eye + a * W + b * W2
    V = eye + b * W + c * W2
    t = (V @ rho[..., None])[..., 0]
    top = torch.cat([R, t[..., None]], -1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=xi.dtype)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], -2)


def invert_matrix_torch(T: torch.Tensor) -> torch.Tensor:
    R = T[..., :3, :3]
    t = T[..., :3, 3:]
    Rt = R.transpose(-1, -2)
    top = torch.cat([Rt, -Rt @ t], -1)
    return torch.cat([top, T[..., 3:, :]], -2)


# --- pinhole camera -----------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_row(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]


def project_point(P, K: CameraIntrinsics) -> np.ndarray:
    x, y, z = np.asarray(P, dtype=float)
    if not z > 0:
        raise BehindCamera(f"point has z={z} <= 0")
    return np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])


def unproject_pixel(p, d: float, K: CameraIntrinsics) -> np.ndarray:
    if not d > 0:
        raise NonPositiveDepth(f"depth {d} must be positive")
    u, v = np.asarray(p, dtype=float)
    return np.array([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d])


# --- trajectories ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise GeometryError("timestamps and poses differ in length")
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            raise GeometryError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def matrices(self) -> np.ndarray:
        return np.array([p.matrix() for p in self.poses]).reshape(-1, 4, 4)

    def subset(self, indices: Sequence[int]) -> Trajectory:
        return Trajectory(self.timestamps[list(indices)], tuple(self.poses[i] for i in indices))

    @classmethod
    def from_relative(cls, timestamps, motions: Iterable[Pose3], start: Pose3 | None = None) -> Trajectory:
        """Chain relative motions (one fewer than timestamps) into world poses."""
        pose = start if start is not None else Pose3.identity()
        poses = [pose]
        for m in motions:
            pose = compose(pose, m)
            poses.append(pose)
        return cls(timestamps, tuple(poses))


def pose_to_row(T: Pose3) -> list[float]:
    return T.matrix()[:3, :].reshape(-1).tolist()


def pose_from_row(row) -> Pose3:
    vals = np.asarray(row, dtype=float).reshape(-1)
    if vals.size != 12:
        raise GeometryError(f"pose row needs 12 numbers, got {vals.size}")
    M = vals.reshape(3, 4)
    return Pose3.from_rt(M[:, :3], M[:, 3])


def format_pose_row(T: Pose3) -> str:
    # + 0.0 folds -0.0 into 0.0 so equal poses always print the same
    return " ".join(repr(float(x) + 0.0) for x in pose_to_row(T))


def write_poses(path, poses: Iterable[Pose3]) -> None:
    with open(path, "w") as f:
        for T in poses:
            f.write(format_pose_row(T) + "\n")


def read_poses(path) -> list[Pose3]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                poses.append(pose_from_row([float(x) for x in line.split()]))
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: {exc}") from exc
    return poses
