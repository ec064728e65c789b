"""Loop-closure detection, SE(3) pose-graph optimization and point-cloud export."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose3,
    Trajectory,
    Twist,
    compose,
    format_pose_row,
    inverse,
    pose_from_row,
    se3_exp,
    se3_log,
)

GRID = 8
ORIENTATION_BINS = 8
HISTOGRAM_WEIGHT = 0.5


class BackendError(ValueError):
    pass


class LengthMismatch(BackendError):
    pass


class NotConnected(BackendError):
    pass


class SolverDiverged(RuntimeError):
    pass


class FrameMismatch(BackendError):
    pass


# --- descriptors --------------------------------------------------------------------------------


def _block_means(image: np.ndarray, rows: int, cols: int) -> np.ndarray:
    H, W = image.shape
    r = np.linspace(0, H, rows + 1).round().astype(int)
    c = np.linspace(0, W, cols + 1).round().astype(int)
    sums = np.add.reduceat(np.add.reduceat(image, r[:-1], axis=0), c[:-1], axis=1)
    counts = np.diff(r)[:, None] * np.diff(c)[None, :]
    return sums / counts


def describe(image) -> np.ndarray:
    """Zero-mean 8x8 intensity grid plus a magnitude-weighted gradient-orientation histogram.

    Each block is unit-normalized before weighting so that neither dominates, then
    the concatenation is L2-normalized.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < GRID or img.shape[1] < GRID:
        raise BackendError(f"expected a 2-D image of at least {GRID}x{GRID}, got {img.shape}")
    grid = _block_means(img, GRID, GRID).reshape(-1)
    grid = grid - grid.mean()
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    bins = np.minimum((angle / (2 * np.pi) * ORIENTATION_BINS).astype(int), ORIENTATION_BINS - 1)
    hist = np.bincount(bins.reshape(-1), weights=mag.reshape(-1), minlength=ORIENTATION_BINS)
    parts = []
    for block, w in ((grid, 1.0), (hist, HISTOGRAM_WEIGHT)):
        n = np.linalg.norm(block)
        parts.append(w * block / n if n > 0 else block)
    f = np.concatenate(parts)
    n = np.linalg.norm(f)
    if n == 0:
        # a constant image has no structure; give it a fixed unit descriptor
        f = np.zeros_like(f)
        f[0] = 1.0
        return f
    return f / n


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"descriptor lengths differ: {a.shape} vs {b.shape}")
    return float(np.clip(a @ b, -1.0, 1.0))


@dataclass
class DescriptorMemory:
    indices: list = field(default_factory=list)
    descriptors: list = field(default_factory=list)

    def __len__(self):
        return len(self.indices)

    def add(self, index: int, descriptor: np.ndarray) -> None:
        if self.indices and index <= self.indices[-1]:
            raise BackendError(f"frame index {index} does not follow {self.indices[-1]}")
        self.indices.append(int(index))
        self.descriptors.append(np.asarray(descriptor, dtype=np.float64))


def detect_loops(
    index: int, descriptor: np.ndarray, memory: DescriptorMemory, threshold: float = 0.95, min_gap: int = 50
) -> list[int]:
    """Earlier frames more than ``min_gap`` frames back whose similarity exceeds ``threshold``."""
    if not 0 < threshold <= 1:
        raise BackendError("threshold must lie in (0, 1]")
    if min_gap < 0:
        raise BackendError("min_gap must be nonnegative")
    hits = []
    for j, d in zip(memory.indices, memory.descriptors):
        if index - j > min_gap:
            s = cosine_similarity(descriptor, d)
            if s > threshold:
                hits.append((s, j))
    hits.sort(key=lambda x: (-x[0], x[1]))
    return [j for _, j in hits]


# --- pose graph -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class Edge:
    kind: str  # "odometry" or "loop"
    i: int
    j: int
    measurement: Pose3  # pose of node j in the frame of node i
    information: np.ndarray

    def __post_init__(self):
        if self.kind not in ("odometry", "loop"):
            raise BackendError(f"unknown edge kind {self.kind!r}")
        info = np.asarray(self.information, dtype=np.float64)
        if info.shape != (6, 6) or not np.allclose(info, info.T):
            raise BackendError("information matrix must be symmetric 6x6")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise BackendError("information matrix must be positive definite")
        object.__setattr__(self, "information", info)


ODOMETRY_INFORMATION = np.eye(6)
LOOP_INFORMATION = 10.0 * np.eye(6)


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)  # frame index -> Pose3
    edges: list = field(default_factory=list)

    def add_node(self, index: int, pose: Pose3) -> None:
        self.nodes[int(index)] = pose

    def add_edge(self, kind: str, i: int, j: int, measurement: Pose3, information=None) -> Edge:
        if i not in self.nodes or j not in self.nodes:
            raise BackendError(f"edge ({i}, {j}) references a missing node")
        if information is None:
            information = ODOMETRY_INFORMATION if kind == "odometry" else LOOP_INFORMATION
        e = Edge(kind, int(i), int(j), measurement, information)
        self.edges.append(e)
        return e

    @property
    def anchor(self) -> int:
        return min(self.nodes)

    def is_connected(self) -> bool:
        if not self.nodes:
            return False
        adj = {k: set() for k in self.nodes}
        for e in self.edges:
            adj[e.i].add(e.j)
            adj[e.j].add(e.i)
        seen, stack = {self.anchor}, [self.anchor]
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        return len(seen) == len(self.nodes)

    def dumps(self) -> str:
        lines = [f"NODE {k} {format_pose_row(self.nodes[k])}" for k in sorted(self.nodes)]
        iu = np.triu_indices(6)
        for e in self.edges:
            info = " ".join(repr(float(x)) for x in e.information[iu])
            lines.append(f"EDGE {e.kind} {e.i} {e.j} {format_pose_row(e.measurement)} {info}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> PoseGraph:
        g = cls()
        iu = np.triu_indices(6)
        for n, line in enumerate(text.splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "NODE":
                    if len(parts) != 14:
                        raise BackendError(f"NODE record needs 14 fields, got {len(parts)}")
                    g.add_node(int(parts[1]), pose_from_row([float(x) for x in parts[2:14]]))
                elif parts[0] == "EDGE":
                    if len(parts) != 37:
                        raise BackendError(f"EDGE record needs 37 fields, got {len(parts)}")
                    info = np.zeros((6, 6))
                    info[iu] = [float(x) for x in parts[16:37]]
                    info = info + np.triu(info, 1).T
                    g.add_edge(parts[1], int(parts[2]), int(parts[3]), pose_from_row([float(x) for x in parts[4:16]]), info)
                else:
                    raise BackendError(f"unknown record {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise BackendError(f"line {n}: {exc}") from exc
        return g


def edge_residual(edge: Edge, xi: Pose3, xj: Pose3) -> np.ndarray:
    return se3_log(compose(inverse(edge.measurement), compose(inverse(xi), xj))).vector()


def chi2(graph: PoseGraph, nodes: dict | None = None) -> float:
    nodes = graph.nodes if nodes is None else nodes
    total = 0.0
    for e in graph.edges:
        r = edge_residual(e, nodes[e.i], nodes[e.j])
        total += float(r @ e.information @ r)
    return total


def _perturb(T: Pose3, delta: np.ndarray) -> Pose3:
    return compose(T, se3_exp(Twist.from_vector(delta)))


@dataclass
class OptimizationResult:
    nodes: dict
    chi2_before: float
    chi2_after: float
    history: list  # chi² after every accepted iteration, starting with the initial value
    iterations: int


def optimize_graph(graph: PoseGraph, max_iterations: int = 50, tol: float = 1e-10, h: float = 1e-6) -> OptimizationResult:
    """Levenberg-Marquardt over right perturbations of every node except the anchor.

    Jacobians are central differences of the edge residuals. The graph is not modified;
    the optimized poses are returned.
    """
    if not graph.is_connected():
        raise NotConnected("pose graph is not connected")
    anchor = graph.anchor
    free = [k for k in sorted(graph.nodes) if k != anchor]
    col = {k: 6 * n for n, k in enumerate(free)}
    nodes = dict(graph.nodes)
    current = chi2(graph, nodes)
    before = current
    history = [current]
    lam = 1e-4
    iterations = 0
    if not free or current <= 1e-24:
        return OptimizationResult(nodes, before, current, history, 1 if free else 0)
    size = 6 * len(free)
    eye = np.eye(6)
    while iterations < max_iterations:
        iterations += 1
        H = np.zeros((size, size))
        b = np.zeros(size)
        for e in graph.edges:
            xi, xj = nodes[e.i], nodes[e.j]
            r = edge_residual(e, xi, xj)
            blocks = {}
            for which, k in (("i", e.i), ("j", e.j)):
                if k == anchor:
                    continue
                J = np.zeros((6, 6))
                for d in range(6):
                    step = h * eye[d]
                    if which == "i":
                        rp = edge_residual(e, _perturb(xi, step), xj)
                        rm = edge_residual(e, _perturb(xi, -step), xj)
                    else:
                        rp = edge_residual(e, xi, _perturb(xj, step))
                        rm = edge_residual(e, xi, _perturb(xj, -step))
                    J[:, d] = (rp - rm) / (2 * h)
                blocks[k] = J
            for a, Ja in blocks.items():
                b[col[a] : col[a] + 6] += Ja.T @ e.information @ r
                for c, Jc in blocks.items():
                    H[col[a] : col[a] + 6, col[c] : col[c] + 6] += Ja.T @ e.information @ Jc
        while True:
            delta = np.linalg.solve(H + lam * np.eye(size), -b)
            trial = dict(nodes)
            for k in free:
                trial[k] = _perturb(nodes[k], delta[col[k] : col[k] + 6])
            new = chi2(graph, trial)
            if new < current:
                lam = max(lam / 10.0, 1e-12)
                change = current - new
                nodes, current = trial, new
                history.append(current)
                break
            if np.linalg.norm(delta) < 1e-12:
                # steps have shrunk below anything representable: converged
                return OptimizationResult(nodes, before, current, history, iterations)
            lam *= 10.0
            if lam > 1e8:
                raise SolverDiverged(f"damping exceeded 1e8 at chi2={current:.6g}")
        if change < tol or current <= 1e-24:
            break
    return OptimizationResult(nodes, before, current, history, iterations)


# --- online loop closing ---------------------------------------------------------------------


@dataclass
class LoopClosure:
    query: int
    match: int
    similarity: float
    measurement: Pose3


class LoopClosingSession:
    """Builds the pose graph from an odometry stream and closes loops as they are detected.

    ``relative_pose(earlier_image, later_image)`` supplies loop-edge measurements (the
    pose of the later frame in the earlier frame). After every optimization new nodes
    are chained onto the optimized estimate.
    """

    def __init__(
        self,
        relative_pose: Callable[[np.ndarray, np.ndarray], Pose3],
        threshold: float = 0.95,
        min_gap: int = 50,
        max_iterations: int = 50,
    ):
        self.relative_pose = relative_pose
        self.threshold = threshold
        self.min_gap = min_gap
        self.max_iterations = max_iterations
        self.graph = PoseGraph()
        self.memory = DescriptorMemory()
        self.images: dict[int, np.ndarray] = {}
        self.closures: list[LoopClosure] = []
        self._last: int | None = None

    def add_frame(self, index: int, image: np.ndarray, motion: Pose3 | None = None) -> list[int]:
        """Insert a frame; ``motion`` is its pose in the previous frame (None for the first)."""
        if self._last is None:
            self.graph.add_node(index, Pose3.identity())
        else:
            if motion is None:
                raise BackendError("every frame after the first needs a relative motion")
            self.graph.add_node(index, compose(self.graph.nodes[self._last], motion))
            self.graph.add_edge("odometry", self._last, index, motion)
        self._last = index
        desc = describe(image)
        found = detect_loops(index, desc, self.memory, self.threshold, self.min_gap)
        if found:
            j = found[0]
            sim = cosine_similarity(desc, self.memory.descriptors[self.memory.indices.index(j)])
            meas = self.relative_pose(self.images[j], image)
            self.graph.add_edge("loop", j, index, meas)
            self.closures.append(LoopClosure(index, j, sim, meas))
            result = optimize_graph(self.graph, self.max_iterations)
            self.graph.nodes.update(result.nodes)
        self.memory.add(index, desc)
        self.images[index] = np.asarray(image)
        return found

    def trajectory(self, timestamps: Sequence[float]) -> Trajectory:
        return Trajectory(np.asarray(timestamps), tuple(self.graph.nodes[k] for k in sorted(self.graph.nodes)))


# --- dense map ------------------------------------------------------------------------------------


def export_pointcloud(trajectory: Trajectory, depths: Sequence[np.ndarray], K: CameraIntrinsics, stride: int = 1) -> np.ndarray:
    """World-frame points for every ``stride``-th pixel (in both directions) of every frame."""
    if len(trajectory) != len(depths):
        raise FrameMismatch(f"{len(trajectory)} poses but {len(depths)} depth maps")
    if stride < 1:
        raise BackendError("stride must be positive")
    clouds = []
    for pose, depth in zip(trajectory.poses, depths):
        d = np.asarray(depth, dtype=np.float64)
        if d.shape != (K.height, K.width):
            raise FrameMismatch(f"depth map {d.shape} does not match the camera {K.height}x{K.width}")
        v, u = np.mgrid[0 : K.height : stride, 0 : K.width : stride]
        z = d[v, u].reshape(-1)
        x = (u.reshape(-1) - K.cx) / K.fx * z
        y = (v.reshape(-1) - K.cy) / K.fy * z
        clouds.append(pose.transform(np.stack([x, y, z], axis=1)))
    return np.concatenate(clouds) if clouds else np.zeros((0, 3))


def write_pointcloud(path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.6f")
