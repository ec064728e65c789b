"""Command line: ``gen`` datasets, ``run`` experiments, ``eval`` trajectory files, ``table`` reports.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, environment_seed, load_config, scene_seed
from .geometry import GeometryError, Trajectory, read_poses
from .metrics import DEFAULT_LENGTHS, MetricsError, relative_segment_errors, remap_errors
from .simworld import SimError, generate_scene, read_dataset, write_dataset

log = logging.getLogger("contslam")


def _load(args):
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = args.out
    if getattr(args, "methods", None):
        overrides["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    return config.with_overrides(**overrides) if overrides else config


def cmd_gen(args) -> int:
    config = _load(args)
    root = Path(config.output) / "datasets"
    jobs = [(config.pretrain.env, s) for s in config.pretrain.scenes]
    jobs += [(env, s) for env, specs in config.scenes.items() for s in specs]
    for env_id, spec in jobs:
        scene = generate_scene(environment_seed(config, config.environment(env_id)), scene_seed(config, spec), config.camera)
        write_dataset(scene, root / spec.scene_id)
        log.info("wrote %s (%d frames)", root / spec.scene_id, len(scene))
    return 0


def cmd_run(args) -> int:
    from .harness import emit_report, run_experiment

    config = _load(args)
    loops = None if args.loops is None else args.loops == "on"
    table = run_experiment(config, loops=loops)
    paths = emit_report(table, config.output)
    print(paths["txt"].read_text(), end="")
    log.info("reports in %s", config.output)
    return 0


def cmd_eval(args) -> int:
    scene = read_dataset(args.dataset) if args.dataset else None
    if args.gt:
        gt_poses = read_poses(args.gt)
    elif scene is not None and scene.has_ground_truth:
        gt_poses = list(scene.poses)
    else:
        raise ConfigError("ground truth is required: pass --gt or a dataset with poses_gt.txt")
    est_poses = read_poses(args.estimate)
    if len(est_poses) != len(gt_poses):
        raise ConfigError(f"estimate has {len(est_poses)} poses, ground truth {len(gt_poses)}")
    times = range(len(gt_poses))
    lengths = tuple(float(x) for x in args.lengths.split(",")) if args.lengths else DEFAULT_LENGTHS
    err = relative_segment_errors(
        Trajectory(list(times), gt_poses), Trajectory(list(times), est_poses), lengths, args.step, args.median_scaling
    )
    t_hat, r_hat = remap_errors(err)
    print(json.dumps({"t_err": err.t_err, "r_err": err.r_err, "t_hat": t_hat, "r_hat": r_hat, "segments": err.segments}))
    return 0


def cmd_table(args) -> int:
    from .harness import emit_report, load_report, report_text

    table = load_report(args.report)
    if args.out:
        emit_report(table, args.out)
    print(report_text(table), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment YAML file")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="override the output directory")

    g = sub.add_parser("gen", help="render the configured scenes as datasets")
    common(g)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the continual-learning experiment")
    common(r)
    r.add_argument("--methods", help="comma-separated subset of methods")
    r.add_argument("--loops", choices=("on", "off"), help="loop closure during deployments")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="segment errors of a KITTI-format trajectory file")
    e.add_argument("estimate", help="estimated poses, one 12-number row per frame")
    e.add_argument("--gt", help="ground-truth poses file")
    e.add_argument("--dataset", help="dataset directory holding poses_gt.txt")
    e.add_argument("--lengths", help="comma-separated segment lengths in meters")
    e.add_argument("--step", type=int, default=1)
    e.add_argument("--median-scaling", action="store_true")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("table", help="re-emit a report from its JSON")
    t.add_argument("report", help="report.json")
    t.add_argument("--out", help="directory for regenerated JSON/CSV/text")
    t.set_defaults(func=cmd_table)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, SimError, GeometryError, MetricsError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
