#!/usr/bin/env python3
"""Run the benchmark for several master seeds and summarize AQ/RQ per method.

    python3 scripts/run_benchmark.py --config configs/acceptance.yaml --seeds 0,1,2,3

Each seed's full report (JSON, CSV, text) goes to <out>/seed_<n>/.
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np
import torch

from contslam.config import load_config
from contslam.harness import emit_report, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--methods", help="comma-separated subset of methods")
    ap.add_argument("--out", help="output directory (defaults to the config's)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)

    config = load_config(args.config)
    out = Path(args.out or config.output)
    methods = tuple(args.methods.split(",")) if args.methods else config.methods
    seeds = [int(s) for s in args.seeds.split(",")]
    collected = {m: {"AQ_trans": [], "RQ_trans": []} for m in methods}
    for seed in seeds:
        table = run_experiment(config.with_overrides(seed=seed), methods=methods)
        emit_report(table, out / f"seed_{seed}")
        for m in methods:
            for key in collected[m]:
                value = table.aggregate[m][key]
                if value is not None:
                    collected[m][key].append(value)
        print(f"seed {seed}: " + "  ".join(f"{m} AQ {table.aggregate[m]['AQ_trans']:.3f}" for m in methods), flush=True)

    print(f"\n{'method':<14}{'AQ_trans mean':>15}{'sd':>8}{'RQ_trans mean':>16}{'sd':>8}")
    summary = {}
    for m in methods:
        aq, rq = np.array(collected[m]["AQ_trans"]), np.array(collected[m]["RQ_trans"])
        row = f"{m:<14}{aq.mean():>15.4f}{aq.std():>8.4f}"
        row += f"{rq.mean():>16.4f}{rq.std():>8.4f}" if len(rq) else f"{'--':>16}{'--':>8}"
        print(row)
        summary[m] = {"AQ_trans": aq.tolist(), "RQ_trans": rq.tolist()}
    (out / "summary.json").write_text(json.dumps({"seeds": seeds, "methods": summary}, indent=2) + "\n")


if __name__ == "__main__":
    main()
