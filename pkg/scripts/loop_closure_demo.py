#!/usr/bin/env python3
"""Loop closing on a revisit scene with drifting odometry, plus a dense map export.

Odometry is ground truth with multiplicative translation noise and a small yaw bias,
so the drift is known. Loop-edge measurements come from ground truth as well; the
point of the demo is the detection and graph side, not the networks.

    python3 scripts/loop_closure_demo.py --out runs/loop_demo
"""

import argparse
from pathlib import Path

import numpy as np

from contslam.backend import LoopClosingSession, export_pointcloud, write_pointcloud
from contslam.config import load_config
from contslam.geometry import Pose3, Trajectory, Twist, compose, inverse, se3_exp
from contslam.metrics import relative_segment_errors
from contslam.simworld import SceneSpec, generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--env", default="P")
    ap.add_argument("--length", type=float, default=40.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.02, help="relative translation noise per step")
    ap.add_argument("--yaw-bias", type=float, default=0.004, help="rad per step")
    ap.add_argument("--out", default="runs/loop_demo")
    args = ap.parse_args()

    config = load_config(args.config)
    scene = generate_scene(config.environment(args.env), SceneSpec("revisit", seed=args.seed, length=args.length, revisit=True))
    truth = scene.poses
    lookup = {scene.images[k].tobytes(): k for k in range(len(scene))}
    rng = np.random.default_rng(args.seed)

    def true_relative(a, b):
        return compose(inverse(truth[lookup[a.tobytes()]]), truth[lookup[b.tobytes()]])

    lc = config.loop_closure
    session = LoopClosingSession(true_relative, lc.threshold, lc.min_gap)
    raw = [Pose3.identity()]
    for k in range(len(scene)):
        motion = None
        if k:
            rel = compose(inverse(truth[k - 1]), truth[k])
            t = rel.translation * (1 + args.noise * rng.standard_normal())
            motion = compose(Pose3.from_rt(rel.rotation, t), se3_exp(Twist([0, args.yaw_bias, 0], [0, 0, 0])))
            raw.append(compose(raw[-1], motion))
        session.add_frame(k, scene.images[k], motion)

    gt = Trajectory(scene.timestamps, [compose(inverse(truth[0]), p) for p in truth])
    dead = Trajectory(scene.timestamps, raw)
    slam = session.trajectory(scene.timestamps)
    lengths = tuple(config.evaluation.lengths)
    for name, traj in (("odometry only", dead), ("with loop closure", slam)):
        e = relative_segment_errors(gt, traj, lengths)
        end = np.linalg.norm(traj.poses[-1].translation - gt.poses[-1].translation)
        print(f"{name:<18} t_err {e.t_err:6.2f} %  r_err {e.r_err:6.2f} deg/100m  endpoint error {end:.3f} m")
    print(f"loop closures: {[(c.query, c.match, round(c.similarity, 4)) for c in session.closures]}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "graph.txt").write_text(session.graph.dumps())
    points = export_pointcloud(slam, list(scene.depths), scene.camera, stride=4)
    write_pointcloud(out / "map.xyz", points)
    print(f"wrote {out / 'graph.txt'} and {len(points)} points to {out / 'map.xyz'}")


if __name__ == "__main__":
    main()
