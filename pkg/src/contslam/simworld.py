"""Procedural multi-environment scenes with exact depth, poses and speeds.

A scene is a smooth camera path over a textured ground plane lined with boxes. Each
pixel is ray-cast against the plane and the boxes, so the depth map is exact and the
images are consistent with the ground-truth motion up to texture interpolation and
sensor noise. Environments differ in texture frequency, contrast, illumination, box
density and driving speed.

World frame: x right, y down, z forward at the start pose. The ground plane is
``y = camera_height``. Camera frame follows the same convention.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose3, Trajectory, format_pose_row, read_poses

DEFAULT_CAMERA = CameraIntrinsics(60.0, 60.0, 48.0, 24.0, 96, 48)
SKY_DEPTH = 200.0
CAMERA_HEIGHT = 1.5


class SimError(RuntimeError):
    pass


class DegenerateTrajectory(SimError):
    pass


class MissingFile(SimError):
    pass


class ParseError(SimError):
    pass


class InconsistentLengths(SimError):
    pass


@dataclass(frozen=True)
class EnvironmentSpec:
    env_id: str
    texture_seed: int = 0
    frequency: tuple = (0.3, 1.2)  # cycles per meter, lowest and highest octave
    contrast: float = 0.8
    gain: float = 1.0
    bias: float = 0.0
    box_density: float = 0.25  # boxes per meter of path, each side
    box_height: tuple = (1.5, 5.0)
    speed: tuple = (4.0, 6.0)  # m/s
    noise: float = 0.005
    velocity_noise: float = 0.01
    sky: float = 0.8

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError("gain must be positive")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must lie in (0, 1]")
        if self.noise < 0 or self.velocity_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0 < self.speed[0] <= self.speed[1]:
            raise ValueError("speed bounds must be positive and ordered")


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    seed: int = 0
    length: float = 100.0  # meters
    max_curvature: float = 0.03  # 1/m
    revisit: bool = False
    frame_rate: float = 10.0

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise ValueError("frame rate must be positive")


@dataclass(eq=False)
class RenderedScene:
    images: np.ndarray  # (N, H, W) uint8
    timestamps: np.ndarray  # (N,)
    velocities: np.ndarray  # (N,) speed reading for the interval ending at each frame
    camera: CameraIntrinsics
    env_id: str = ""
    scene_id: str = ""
    depths: np.ndarray | None = None  # (N, H, W) float32
    poses: tuple | None = None  # world poses, None when ground truth is unavailable

    def __post_init__(self):
        n = len(self.images)
        lengths = {n, len(self.timestamps), len(self.velocities)}
        if self.depths is not None:
            lengths.add(len(self.depths))
        if self.poses is not None:
            lengths.add(len(self.poses))
        if len(lengths) != 1:
            raise InconsistentLengths(f"per-frame arrays disagree in length: {sorted(lengths)}")

    def __len__(self):
        return len(self.images)

    @property
    def has_ground_truth(self) -> bool:
        return self.poses is not None

    def frame(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float64) / 255.0

    def trajectory(self) -> Trajectory:
        if self.poses is None:
            raise SimError(f"scene {self.scene_id} has no ground-truth poses")
        return Trajectory(self.timestamps, self.poses)


# --- procedural texture -------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1) (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x165667B19E3779F9)
        h ^= h >> np.uint64(30)
        h *= _M1
        h ^= h >> np.uint64(27)
        h *= _M2
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(x: np.ndarray, y: np.ndarray, seed: int, freq: float) -> np.ndarray:
    x = x * freq
    y = y * freq
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    a = _hash01(x0, y0, seed)
    b = _hash01(x0 + 1, y0, seed)
    c = _hash01(x0, y0 + 1, seed)
    d = _hash01(x0 + 1, y0 + 1, seed)
    return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy


def texture(x: np.ndarray, y: np.ndarray, env: EnvironmentSpec, salt: int) -> np.ndarray:
    """Multi-octave value noise in [0, 1] spanning the environment's frequency band."""
    lo, hi = env.frequency
    octaves = max(1, int(round(math.log2(hi / lo))) + 1)
    freqs = np.geomspace(lo, hi, octaves)
    total = np.zeros_like(x)
    weight = 0.0
    for k, f in enumerate(freqs):
        w = 0.6**k
        total += w * value_noise(x, y, env.texture_seed * 7919 + salt * 131 + k, f)
        weight += w
    return total / weight


# --- world and path ---------------------------------------------------------------------


@dataclass
class World:
    box_min: np.ndarray  # (M, 3)
    box_max: np.ndarray  # (M, 3)
    box_shade: np.ndarray  # (M,)


def _smooth_profile(rng: np.random.Generator, s: np.ndarray, length: float, terms: int = 4) -> np.ndarray:
    out = np.zeros_like(s)
    for k in range(1, terms + 1):
        out += rng.normal() / k * np.sin(2 * math.pi * k * s / length + rng.uniform(0, 2 * math.pi))
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def make_path(scene: SceneSpec, step: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Dense path samples: positions (n, 2) in the (x, z) plane and headings (n,)."""
    if not scene.length > 0:
        raise DegenerateTrajectory(f"scene {scene.scene_id} has non-positive length")
    rng = np.random.default_rng([scene.seed, 17])
    n = max(2, int(math.ceil(scene.length / step)) + 1)
    s = np.linspace(0.0, scene.length, n)
    if scene.revisit:
        # closed loop: radius perturbed by low-order harmonics, resampled by arc length
        phi = np.linspace(0.0, 2 * math.pi, 4 * n)
        r = np.ones_like(phi)
        for k in (2, 3):
            r += rng.uniform(0.0, 0.12) * np.cos(k * phi + rng.uniform(0, 2 * math.pi))
        pts = np.stack([1.0 - r * np.cos(phi), r * np.sin(phi)], 1)
        pts -= pts[0]
        arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        pts *= scene.length / arc[-1]
        arc *= scene.length / arc[-1]
        t0 = pts[1] - pts[0]
        h0 = math.atan2(t0[0], t0[1])
        c, sn = math.cos(h0), math.sin(h0)
        pts = np.stack([pts[:, 0] * c - pts[:, 1] * sn, pts[:, 0] * sn + pts[:, 1] * c], 1)
        xs = np.interp(s, arc, pts[:, 0])
        zs = np.interp(s, arc, pts[:, 1])
        heading = np.unwrap(np.arctan2(np.gradient(xs, s), np.gradient(zs, s)))
        return np.stack([xs, zs], 1), heading - heading[0]
    kappa = scene.max_curvature * _smooth_profile(rng, s, scene.length)
    heading = np.concatenate([[0.0], np.cumsum(0.5 * (kappa[1:] + kappa[:-1]) * np.diff(s))])
    xs = np.concatenate([[0.0], np.cumsum(np.sin(heading[:-1]) * np.diff(s))])
    zs = np.concatenate([[0.0], np.cumsum(np.cos(heading[:-1]) * np.diff(s))])
    return np.stack([xs, zs], 1), heading


def make_world(env: EnvironmentSpec, scene: SceneSpec, path: np.ndarray, heading: np.ndarray) -> World:
    rng = np.random.default_rng([scene.seed, env.texture_seed, 29])
    total = float(np.sum(np.hypot(*np.diff(path, axis=0).T)))
    count = int(round(env.box_density * total))
    mins, maxs, shades = [], [], []
    for side in (-1.0, 1.0):
        for _ in range(count):
            k = rng.integers(0, len(path))
            offset = rng.uniform(4.5, 9.0)
            normal = np.array([math.cos(heading[k]), -math.sin(heading[k])]) * side
            cx, cz = path[k] + normal * offset
            half = rng.uniform(0.6, 2.0, size=2)
            lo = np.array([cx - half[0], 0.0, cz - half[1]])
            hi = np.array([cx + half[0], 0.0, cz + half[1]])
            height = rng.uniform(*env.box_height)
            lo[1] = CAMERA_HEIGHT - height
            hi[1] = CAMERA_HEIGHT
            # keep the driving corridor clear
            px = np.clip(path[:, 0], lo[0], hi[0])
            pz = np.clip(path[:, 1], lo[2], hi[2])
            if np.min(np.hypot(path[:, 0] - px, path[:, 1] - pz)) < 2.5:
                continue
            mins.append(lo)
            maxs.append(hi)
            shades.append(rng.uniform(0.55, 1.0))
    if not mins:
        return World(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    return World(np.array(mins), np.array(maxs), np.array(shades))


def camera_pose(position: np.ndarray, yaw: float) -> Pose3:
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return Pose3.from_rt(R, [position[0], 0.0, position[1]])


def _visible_boxes(world: World, origin: np.ndarray, rotation: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    lo, hi = world.box_min, world.box_max
    corners = np.stack(
        [np.stack([np.where(c & 1, hi[:, 0], lo[:, 0]), np.where(c & 2, hi[:, 1], lo[:, 1]), np.where(c & 4, hi[:, 2], lo[:, 2])], -1) for c in range(8)],
        1,
    )
    cam = (corners - origin) @ rotation
    z = cam[..., 2]
    near = np.linalg.norm(corners.mean(1) - origin, axis=1) < SKY_DEPTH * 0.5
    ahead = (z > 0.1).any(1)
    straddle = (z <= 0.1).any(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0.1, K.fx * cam[..., 0] / z + K.cx, np.nan)
    umin = np.nanmin(np.where(np.isnan(u), np.inf, u), axis=1)
    umax = np.nanmax(np.where(np.isnan(u), -np.inf, u), axis=1)
    in_view = (umax > -2) & (umin < K.width + 2)
    return np.flatnonzero(near & ahead & (in_view | straddle))


def _intersect(world: World, origin: np.ndarray, rotation: np.ndarray, K: CameraIntrinsics, d: np.ndarray):
    """Nearest hit along rays ``origin + t d``: depth, kind (0 sky, 1 ground, 2 box), box index, slab axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (CAMERA_HEIGHT - origin[1]) / d[:, 1]
    ground = (d[:, 1] > 1e-9) & (tg < SKY_DEPTH)
    depth = np.where(ground, tg, np.inf)
    kind = ground.astype(np.int8)
    box = np.zeros(len(d), dtype=np.int64)
    axis = np.zeros(len(d), dtype=np.int64)
    if len(world.box_min):
        keep = _visible_boxes(world, origin, rotation, K)
        if len(keep):
            lo, hi = world.box_min[keep], world.box_max[keep]
            dd = np.where(np.abs(d) < 1e-12, 1e-12, d)
            tmins, tmaxs = [], []
            for k in range(3):
                inv = 1.0 / dd[:, k : k + 1]
                a = (lo[None, :, k] - origin[k]) * inv
                b = (hi[None, :, k] - origin[k]) * inv
                tmins.append(np.minimum(a, b))
                tmaxs.append(np.maximum(a, b))
            tnear = np.maximum(np.maximum(tmins[0], tmins[1]), tmins[2])
            tfar = np.minimum(np.minimum(tmaxs[0], tmaxs[1]), tmaxs[2])
            tbox = np.where((tnear <= tfar) & (tnear > 1e-6), tnear, np.inf)
            j = np.argmin(tbox, axis=-1)
            rows = np.arange(len(d))
            tb = tbox[rows, j]
            closer = tb < depth
            depth = np.where(closer, tb, depth)
            kind = np.where(closer, 2, kind).astype(np.int8)
            box = np.where(closer, keep[j], 0)
            near = np.stack([tm[rows, j] for tm in tmins], -1)
            axis = np.where(closer, np.argmax(near, axis=-1), 0)
    return depth, kind, box, axis


def raycast(world: World, env: EnvironmentSpec, pose: Pose3, K: CameraIntrinsics, u: np.ndarray, v: np.ndarray, shade: bool = True):
    """Intensity (before noise, or None when ``shade`` is False) and depth along pixel rays."""
    shape = u.shape
    d_cam = np.stack([(u.ravel() - K.cx) / K.fx, (v.ravel() - K.cy) / K.fy, np.ones(u.size)], -1)
    origin = pose.translation
    # t along d is the camera-frame depth because d_cam has unit z
    d = d_cam @ pose.rotation.T
    depth, kind, box, axis = _intersect(world, origin, pose.rotation, K, d)
    depth = np.where(kind > 0, depth, SKY_DEPTH)
    if not shade:
        return None, depth.reshape(shape)
    value = np.full(u.size, env.sky)
    g = kind == 1
    if g.any():
        p = origin + depth[g, None] * d[g]
        value[g] = 0.75 * texture(p[:, 0], p[:, 2], env, salt=1) + 0.1
    b = kind == 2
    if b.any():
        p = origin + depth[b, None] * d[b]
        ax = axis[b]
        idx = box[b]
        face_u = np.where(ax == 0, p[:, 2], p[:, 0])
        face_v = np.where(ax == 1, p[:, 2], p[:, 1])
        shading = world.box_shade[idx] * np.choose(ax, [0.85, 1.0, 0.7])
        value[b] = shading * (0.7 * texture(face_u + 13.0 * idx, face_v, env, salt=2) + 0.2)
    intensity = env.bias + env.gain * (0.5 + env.contrast * (value - 0.5))
    return intensity.reshape(shape), depth.reshape(shape)


def generate_scene(
    env: EnvironmentSpec, scene: SceneSpec, camera: CameraIntrinsics = DEFAULT_CAMERA, supersample: int = 2
) -> RenderedScene:
    path, heading = make_path(scene)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(path, axis=0).T))])
    rng = np.random.default_rng([scene.seed, env.texture_seed, 43])
    # speed profile: smooth in time, inside the environment bounds
    lo, hi = env.speed
    dt = 1.0 / scene.frame_rate
    phases = rng.uniform(0, 2 * math.pi, 2)
    s_list = [0.0]
    k = 0
    while s_list[-1] < arc[-1]:
        tau = k * dt
        speed = lo + (hi - lo) * 0.5 * (1 + 0.6 * math.sin(0.3 * tau + phases[0]) + 0.4 * math.sin(0.11 * tau + phases[1]))
        s_list.append(min(arc[-1], s_list[-1] + speed * dt))
        k += 1
    s_frames = np.array(s_list)
    if len(s_frames) < 3:
        raise DegenerateTrajectory(f"scene {scene.scene_id} yields fewer than 3 frames")
    xs = np.interp(s_frames, arc, path[:, 0])
    zs = np.interp(s_frames, arc, path[:, 1])
    yaw = np.interp(s_frames, arc, heading)
    poses = tuple(camera_pose(np.array([x, z]), a) for x, z, a in zip(xs, zs, yaw))
    world = make_world(env, scene, path, heading)

    H, W = camera.height, camera.width
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    v_sub = np.broadcast_to(np.arange(H)[:, None, None, None] + offs[None, :, None, None], (H, ss, W, ss))
    u_sub = np.broadcast_to(np.arange(W)[None, None, :, None] + offs[None, None, None, :], (H, ss, W, ss))
    v_c, u_c = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    noise_rng = np.random.default_rng([scene.seed, env.texture_seed, 61])
    images = np.empty((len(poses), H, W), dtype=np.uint8)
    depths = np.empty((len(poses), H, W), dtype=np.float32)
    for i, pose in enumerate(poses):
        val, _ = raycast(world, env, pose, camera, u_sub.reshape(H * ss, W * ss), v_sub.reshape(H * ss, W * ss))
        val = val.reshape(H, ss, W, ss).mean(axis=(1, 3))
        _, dep = raycast(world, env, pose, camera, u_c, v_c, shade=False)
        val = val + env.noise * noise_rng.standard_normal(val.shape)
        images[i] = np.round(np.clip(val, 0.0, 1.0) * 255).astype(np.uint8)
        depths[i] = dep
    times = np.arange(len(poses)) / scene.frame_rate
    steps = np.hypot(np.diff(xs), np.diff(zs)) / dt
    speeds = np.concatenate([[steps[0]], steps])
    speeds = speeds * (1.0 + env.velocity_noise * noise_rng.standard_normal(speeds.shape))
    return RenderedScene(images, times, np.abs(speeds), camera, env.env_id, scene.scene_id, depths, poses)


# --- dataset directory format ---------------------------------------------------------------


def _write_lines(path: Path, lines) -> None:
    with open(path, "w") as f:
        for line in lines:
            f.write(line + "\n")
        f.flush()
        os.fsync(f.fileno())


def write_pgm(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(image.tobytes())
        f.flush()
        os.fsync(f.fileno())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError(f"{path}: only 8-bit PGM is supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ParseError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()


def write_dataset(scene: RenderedScene, directory) -> None:
    root = Path(directory)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        K = scene.camera
        _write_lines(root / "calib.txt", [" ".join(repr(float(x)) for x in K.to_row())])
        _write_lines(root / "times.txt", [repr(float(t)) for t in scene.timestamps])
        _write_lines(root / "velocities.txt", [repr(float(v)) for v in scene.velocities])
        _write_lines(root / "meta.txt", [f"env_id {scene.env_id}", f"scene_id {scene.scene_id}"])
        for i, img in enumerate(scene.images):
            write_pgm(root / "images" / f"{i:06d}.pgm", img)
        if scene.depths is not None:
            (root / "depth").mkdir(exist_ok=True)
            for i, dep in enumerate(scene.depths):
                with open(root / "depth" / f"{i:06d}.bin", "wb") as f:
                    f.write(np.asarray(dep, dtype="<f4").tobytes())
                    f.flush()
                    os.fsync(f.fileno())
        if scene.poses is not None:
            _write_lines(root / "poses_gt.txt", [format_pose_row(p) for p in scene.poses])
    except OSError as exc:
        raise SimError(f"could not write dataset to {root}: {exc}") from exc


def _read_floats(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    try:
        return np.array([float(x) for x in path.read_text().split()], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def read_dataset(directory) -> RenderedScene:
    root = Path(directory)
    calib = _read_floats(root / "calib.txt")
    if calib.size != 6:
        raise ParseError(f"{root / 'calib.txt'}: expected 6 numbers")
    K = CameraIntrinsics(calib[0], calib[1], calib[2], calib[3], int(calib[4]), int(calib[5]))
    times = _read_floats(root / "times.txt")
    vel = _read_floats(root / "velocities.txt")
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise MissingFile(str(image_dir))
    files = sorted(image_dir.glob("*.pgm"))
    images = np.stack([read_pgm(p) for p in files]) if files else np.zeros((0, K.height, K.width), np.uint8)
    if images.shape[1:] != (K.height, K.width):
        raise InconsistentLengths(f"images are {images.shape[1:]}, calibration says {(K.height, K.width)}")
    depths = None
    depth_dir = root / "depth"
    if depth_dir.is_dir():
        dfiles = sorted(depth_dir.glob("*.bin"))
        depths = np.stack(
            [np.frombuffer(p.read_bytes(), dtype="<f4").reshape(K.height, K.width) for p in dfiles]
        ).astype(np.float32) if dfiles else None
    poses = None
    if (root / "poses_gt.txt").exists():
        try:
            poses = tuple(read_poses(root / "poses_gt.txt"))
        except ValueError as exc:
            raise ParseError(str(exc)) from exc
    meta = {}
    if (root / "meta.txt").exists():
        for line in (root / "meta.txt").read_text().splitlines():
            key, _, value = line.partition(" ")
            meta[key] = value
    return RenderedScene(images, times, vel, K, meta.get("env_id", ""), meta.get("scene_id", root.name), depths, poses)
