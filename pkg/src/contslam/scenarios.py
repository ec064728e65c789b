"""Scripted situations with known ground truth for checking the backend."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backend import PoseGraph, describe, detect_loops, DescriptorMemory
from .geometry import Pose3, compose, inverse
from .simworld import RenderedScene


def _yaw(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class DriftingLoop:
    graph: PoseGraph
    truth: list  # ground-truth world poses, node k at index k

    def endpoint_error(self, nodes: dict) -> float:
        last = max(nodes)
        return float(np.linalg.norm(nodes[last].translation - self.truth[last].translation))


def drifting_square(side: float = 10.0, step: float = 1.0, noise: float = 0.01, seed: int = 0) -> DriftingLoop:
    """Closed square walk; odometry translations carry ``noise`` x edge-length Gaussian error.

    Nodes are dead-reckoned from the noisy odometry. A single exact loop edge ties the
    last node (which coincides with the first) back to node 0.
    """
    rng = np.random.default_rng(seed)
    per_side = int(round(side / step))
    truth = [Pose3.identity()]
    for corner in range(4):
        for k in range(per_side):
            turn = _yaw(math.pi / 2) if k == per_side - 1 else np.eye(3)
            truth.append(compose(truth[-1], Pose3.from_rt(turn, [0.0, 0.0, step])))
    g = PoseGraph()
    g.add_node(0, truth[0])
    for k in range(1, len(truth)):
        rel = compose(inverse(truth[k - 1]), truth[k])
        t = rel.translation + noise * np.linalg.norm(rel.translation) * rng.standard_normal(3)
        meas = Pose3.from_rt(rel.rotation, t)
        g.add_node(k, compose(g.nodes[k - 1], meas))
        g.add_edge("odometry", k - 1, k, meas)
    last = len(truth) - 1
    g.add_edge("loop", 0, last, compose(inverse(truth[0]), truth[last]))
    return DriftingLoop(g, truth)


@dataclass(frozen=True)
class LoopCandidate:
    query: int
    match: int
    true_match: int  # nearest earlier ground-truth frame outside the gap

    @property
    def offset(self) -> int:
        return abs(self.match - self.true_match)


def scan_for_loops(scene: RenderedScene, threshold: float = 0.95, min_gap: int = 50) -> list[LoopCandidate]:
    """Run detection over a scene and label every candidate with its ground-truth revisit."""
    pos = np.array([p.translation for p in scene.poses])
    memory = DescriptorMemory()
    out = []
    for q in range(len(scene)):
        d = describe(scene.frame(q))
        found = detect_loops(q, d, memory, threshold, min_gap)
        if found:
            earlier = np.arange(0, max(0, q - min_gap))
            nearest = int(earlier[np.argmin(np.linalg.norm(pos[earlier] - pos[q], axis=1))]) if len(earlier) else -1
            out.extend(LoopCandidate(q, j, nearest) for j in found)
        memory.add(q, d)
    return out
