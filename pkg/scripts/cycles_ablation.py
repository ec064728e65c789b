#!/usr/bin/env python3
"""Update-cycle ablation: accuracy and relative frame rate of cl_slam versus cycles per frame.

Deploys the pre-trained weights on the first scene of every deployment environment
for each cycle count and reports t_err, r_err and frames per second relative to c = 1.

    python3 scripts/cycles_ablation.py --config configs/acceptance.yaml --cycles 1,3,5,8
"""

import argparse
import dataclasses
import logging

import torch

from contslam.adaptation import DualState, run_deployment
from contslam.config import derive_seed, load_config
from contslam.harness import network_pair, pretrained_weights, render_scenes, score


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acceptance.yaml")
    ap.add_argument("--cycles", default="1,3,5,8")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    torch.set_num_threads(1)

    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    scenes = render_scenes(config)
    pair = network_pair(config)
    depth, pose = pretrained_weights(config, pair, scenes)
    base = DualState.initial(depth, pose, seed=derive_seed(config.seed, "replay") % (2**32))
    targets = [specs[0].scene_id for specs in config.scenes.values()]

    print(f"{'cycles':>6}" + "".join(f"{s + ' t_err':>14}{s + ' r_err':>14}" for s in targets) + f"{'fps':>8}{'rel fps':>9}")
    reference = None
    for c in (int(x) for x in args.cycles.split(",")):
        adapt = dataclasses.replace(config.adaptation, cycles=c, mode="cl_slam")
        line, frames, seconds = f"{c:>6}", 0, 0.0
        for sid in targets:
            result, _ = run_deployment(pair, base, scenes[sid], adapt, config.loss)
            err = score(scenes[sid], result.accepted, result.trajectory(scenes[sid].timestamps), config)
            line += f"{err.t_err:>14.2f}{err.r_err:>14.2f}"
            frames += len(result.accepted)
            seconds += result.runtime
        fps = frames / seconds
        reference = reference or fps
        print(line + f"{fps:>8.2f}{fps / reference:>9.2f}", flush=True)


if __name__ == "__main__":
    main()
