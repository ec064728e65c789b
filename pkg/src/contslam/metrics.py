"""Trajectory segment errors, their [0, 1] remapping, and adaptation/retention quality.

Rotation errors are carried in degrees per 100 m and that numeric value is what the
remapping divides by 180. ``SegmentErrors.rotation_unit`` records this so callers
working in degrees per meter notice the factor of 100.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Trajectory

DEFAULT_LENGTHS = (25.0, 50.0, 100.0, 150.0, 200.0)
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class MetricsError(ValueError):
    pass


class TooShort(MetricsError):
    pass


class IncompleteSet(MetricsError):
    pass


class NotEnoughScenes(MetricsError):
    pass


@dataclass(frozen=True)
class SegmentErrors:
    t_err: float  # percent
    r_err: float  # degrees per 100 m
    segments: int = 0
    rotation_unit: str = "deg/100m"

    def __post_init__(self):
        if not (self.t_err >= 0 and self.r_err >= 0):
            raise MetricsError(f"segment errors must be nonnegative, got {self.t_err}, {self.r_err}")
        if self.rotation_unit != "deg/100m":
            raise MetricsError(f"unsupported rotation unit {self.rotation_unit!r}")


def path_distances(positions: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angles(R: np.ndarray) -> np.ndarray:
    cos = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def median_scale(gt: Trajectory, est: Trajectory) -> float:
    """Ratio of median per-step translation magnitudes (for non-metric estimates)."""
    g = np.linalg.norm(np.diff(gt.positions(), axis=0), axis=1)
    e = np.linalg.norm(np.diff(est.positions(), axis=0), axis=1)
    me = float(np.median(e))
    if me == 0:
        raise MetricsError("estimate has zero median step length")
    return float(np.median(g)) / me


def relative_segment_errors(
    gt: Trajectory,
    est: Trajectory,
    lengths: Sequence[float] = DEFAULT_LENGTHS,
    step: int = 1,
    scale_to_median: bool = False,
) -> SegmentErrors:
    """Average relative pose error over all segments of the given ground-truth lengths.

    A segment starting at frame i with nominal length L ends at the first frame whose
    ground-truth path distance from i reaches L. Errors are divided by L.
    """
    if len(gt) != len(est):
        raise MetricsError(f"frame counts differ: {len(gt)} vs {len(est)}")
    if step < 1:
        raise MetricsError("step must be positive")
    G = gt.matrices()
    E = est.matrices()
    if scale_to_median:
        E = E.copy()
        E[:, :3, 3] *= median_scale(gt, est)
    dist = path_distances(G[:, :3, 3])
    if not lengths or dist[-1] < min(lengths):
        raise TooShort(f"path length {dist[-1]:.3f} m is below the shortest segment length")
    t_errs, r_errs = [], []
    starts = np.arange(0, len(G), step)
    for L in lengths:
        ends = np.searchsorted(dist, dist[starts] + L, side="left")
        ok = ends < len(G)
        i, j = starts[ok], ends[ok]
        if len(i) == 0:
            continue
        gt_rel = np.linalg.inv(G[i]) @ G[j]
        est_rel = np.linalg.inv(E[i]) @ E[j]
        err = np.linalg.inv(est_rel) @ gt_rel
        t_errs.append(np.linalg.norm(err[:, :3, 3], axis=1) / L)
        r_errs.append(_rotation_angles(err[:, :3, :3]) / L)
    t = np.concatenate(t_errs)
    r = np.concatenate(r_errs)
    return SegmentErrors(float(t.mean() * 100.0), float(np.degrees(r.mean()) * 100.0), int(len(t)))


def remap_errors(e: SegmentErrors) -> tuple[float, float]:
    t_hat = min(1.0, max(0.0, 1.0 - e.t_err / 100.0))
    r_hat = min(1.0, max(0.0, 1.0 - e.r_err / 180.0))
    return t_hat, r_hat


@dataclass(frozen=True)
class Quality:
    trans: float
    rot: float


def _require(records: Mapping, keys) -> None:
    missing = [k for k in keys if k not in records]
    if missing:
        raise IncompleteSet(f"missing records for {missing}")


def adaptation_quality(records: Mapping, sequences: Sequence | None = None) -> Quality:
    """Mean remapped error over the adaptation sequences (all records when ``sequences`` is None)."""
    keys = list(records) if sequences is None else list(sequences)
    if not keys:
        raise IncompleteSet("no records")
    _require(records, keys)
    remapped = np.array([remap_errors(records[k]) for k in keys])
    return Quality(float(remapped[:, 0].mean()), float(remapped[:, 1].mean()))


def retention_quality(records: Mapping, pairs: Sequence[tuple]) -> Quality:
    """Mean difference (mixed minus reference) of remapped errors over (mixed, reference) pairs."""
    if not pairs:
        raise IncompleteSet("no retention pairs")
    _require(records, [k for pair in pairs for k in pair])
    diffs = np.array([np.subtract(remap_errors(records[m]), remap_errors(records[r])) for m, r in pairs])
    return Quality(float(diffs[:, 0].mean()), float(diffs[:, 1].mean()))


@dataclass(frozen=True)
class EvalPlan:
    pretrain: str
    scenes: dict  # env_id -> list of scene keys in deployment order
    aq: tuple  # sequences (tuples of scene keys, pre-training first)
    rq: tuple  # (mixed sequence, reference sequence) pairs
    main: tuple  # the round-robin sequence the retention pairs are cut from

    @property
    def sequences(self) -> tuple:
        seen = []
        for s in list(self.aq) + [x for pair in self.rq for x in pair]:
            if s not in seen:
                seen.append(s)
        return tuple(seen)


def make_eval_plan(pretrain: str, env_scenes: Mapping[str, Sequence[str]]) -> EvalPlan:
    """Adaptation and retention sequence sets for the given environments.

    Adaptation: the first scene of every environment alone, then after the first scene
    of each other environment. Retention: the round-robin sequence over environments,
    cut after every scene from an already visited environment, each paired with the
    same sequence minus the foreign scenes since that environment's previous visit.
    """
    envs = list(env_scenes)
    if len(envs) < 2:
        raise NotEnoughScenes("at least two environments are required")
    if any(len(env_scenes[e]) < 1 for e in envs):
        raise NotEnoughScenes("every environment needs at least one scene")
    first = {e: env_scenes[e][0] for e in envs}
    aq = [(pretrain, first[e]) for e in envs]
    aq += [(pretrain, first[a], first[b]) for b in envs for a in envs if a != b]
    rounds = min(len(env_scenes[e]) for e in envs)
    main = [pretrain] + [env_scenes[e][r] for r in range(rounds) for e in envs]
    env_of = {s: e for e in envs for s in env_scenes[e]}
    rq = []
    for k in range(1, len(main)):
        env = env_of[main[k]]
        earlier = [i for i in range(1, k) if env_of[main[i]] == env]
        if not earlier:
            continue
        last = earlier[-1]
        mixed = tuple(main[: k + 1])
        reference = tuple(main[: last + 1]) + (main[k],)
        if mixed != reference:
            rq.append((mixed, reference))
    if not rq:
        raise NotEnoughScenes("retention needs a second scene from some environment")
    return EvalPlan(pretrain, {e: list(v) for e, v in env_scenes.items()}, tuple(aq), tuple(rq), tuple(main))


def metric_report(records: Mapping, plan: EvalPlan | None = None) -> dict:
    """JSON-ready dict: per-record errors and remapped metrics, plus AQ/RQ when a plan is given."""
    out = {"records": []}
    for seq, e in records.items():
        t_hat, r_hat = remap_errors(e)
        out["records"].append(
            {"sequence": list(seq), "t_err": e.t_err, "r_err": e.r_err, "t_hat": t_hat, "r_hat": r_hat}
        )
    if plan is not None:
        aq = adaptation_quality(records, plan.aq)
        rq = retention_quality(records, plan.rq)
        out["aggregate"] = {"AQ_trans": aq.trans, "AQ_rot": aq.rot, "RQ_trans": rq.trans, "RQ_rot": rq.rot}
    return out
