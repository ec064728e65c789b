"""Experiment orchestration: render scenes, pre-train, deploy every method on every plan
sequence, score final scenes and aggregate adaptation/retention quality."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from .adaptation import AdaptationConfig, DualState, run_deployment, pretrain
from .backend import LoopClosingSession
from .config import ExperimentConfig, derive_seed, environment_seed, scene_seed
from .geometry import Trajectory
from .metrics import (
    EvalPlan,
    SegmentErrors,
    adaptation_quality,
    make_eval_plan,
    relative_segment_errors,
    remap_errors,
    retention_quality,
)
from .simworld import RenderedScene, generate_scene
from .toynets import NetworkPair

log = logging.getLogger(__name__)

TIMING_KEY = "timing"


class ExperimentError(RuntimeError):
    pass


def network_pair(config: ExperimentConfig) -> NetworkPair:
    return NetworkPair.for_camera(
        config.camera, downsample=config.network.downsample, widths=tuple(config.network.widths)
    )


def render_scenes(config: ExperimentConfig) -> dict[str, RenderedScene]:
    """Every pre-training and deployment scene, keyed by scene id."""
    out = {}
    jobs = [(config.pretrain.env, s) for s in config.pretrain.scenes]
    jobs += [(env, s) for env, specs in config.scenes.items() for s in specs]
    for env_id, spec in jobs:
        env = environment_seed(config, config.environment(env_id))
        out[spec.scene_id] = generate_scene(env, scene_seed(config, spec), config.camera)
    return out


def pretrained_weights(config: ExperimentConfig, pair: NetworkPair, scenes: dict[str, RenderedScene]):
    depth, pose = pair.init_params(derive_seed(config.seed, "init") % (2**32))
    pre = config.pretrain
    return pretrain(
        pair,
        depth,
        pose,
        [scenes[s.scene_id] for s in pre.scenes],
        epochs=pre.epochs,
        lr=pre.lr,
        weights=config.loss,
        batch_size=pre.batch_size,
        seed=derive_seed(config.seed, "pretrain-order") % (2**32),
        min_distance=config.adaptation.min_distance,
        log=lambda e, l: log.info("pretrain epoch %d loss %.6f", e, l),
    )


def evaluation_plan(config: ExperimentConfig) -> EvalPlan:
    key = config.pretrain.env + ":pretrain"
    envs = {env: [s.scene_id for s in specs] for env, specs in config.scenes.items()}
    return make_eval_plan(key, envs)


def score(scene: RenderedScene, accepted, trajectory: Trajectory, config: ExperimentConfig) -> SegmentErrors:
    gt = scene.trajectory().subset(accepted)
    ev = config.evaluation
    return relative_segment_errors(gt, trajectory, tuple(ev.lengths), ev.step, ev.median_scaling)


@dataclass
class ReportTable:
    config_hash: str
    seed: int
    methods: tuple
    plan: EvalPlan
    rows: list = field(default_factory=list)  # one dict per (method, sequence)
    aggregate: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def row(self, method: str, sequence) -> dict:
        for r in self.rows:
            if r["method"] == method and tuple(r["sequence"]) == tuple(sequence):
                return r
        raise KeyError((method, tuple(sequence)))

    def errors(self, method: str) -> dict:
        return {tuple(r["sequence"]): SegmentErrors(r["t_err"], r["r_err"]) for r in self.rows if r["method"] == method}

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "methods": list(self.methods),
            "plan": {
                "pretrain": self.plan.pretrain,
                "main": list(self.plan.main),
                "aq": [list(s) for s in self.plan.aq],
                "rq": [[list(m), list(r)] for m, r in self.plan.rq],
            },
            "rows": self.rows,
            "aggregate": self.aggregate,
            "invariants": self.invariants,
            TIMING_KEY: self.timing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ReportTable:
        p = d["plan"]
        scenes: dict = {}
        plan = EvalPlan(
            p["pretrain"],
            scenes,
            tuple(tuple(s) for s in p["aq"]),
            tuple((tuple(m), tuple(r)) for m, r in p["rq"]),
            tuple(p["main"]),
        )
        return cls(
            d["config_hash"], d["seed"], tuple(d["methods"]), plan, d["rows"], d["aggregate"],
            d.get("invariants", {}), d.get(TIMING_KEY, {}),
        )


def _loop_session(config: ExperimentConfig, pair: NetworkPair):
    """A loop-closing session plus the per-frame hook that feeds it.

    Loop-edge measurements use the pose parameters current at detection time.
    """
    current = {}
    session = LoopClosingSession(
        lambda a, b: pair.predict_motion(current["params"], a, b),
        config.loop_closure.threshold,
        config.loop_closure.min_gap,
    )

    def hook(index, image, motion, params):
        current["params"] = params
        session.add_frame(index, image, motion)

    return session, hook


def _deploy_chain(config, pair, base_state, scenes, method, plan, loops: bool):
    """Deploy ``method`` on every plan sequence, reusing shared prefixes."""
    adapt = AdaptationConfig(**{**config.adaptation.__dict__, "mode": method})
    states: dict[tuple, DualState] = {(plan.pretrain,): base_state}
    results: dict[tuple, dict] = {}
    handoff_ok = True
    unchanged = True
    timing = {}
    for seq in sorted(plan.sequences, key=lambda s: (len(s), s)):
        for k in range(2, len(seq) + 1):
            prefix = tuple(seq[:k])
            if prefix in states:
                continue
            parent = states[prefix[:-1]]
            scene = scenes[prefix[-1]]
            session = hook = None
            if loops:
                session, hook = _loop_session(config, pair)
            try:
                result, state = run_deployment(pair, parent, scene, adapt, config.loss, on_frame=hook)
            except Exception as exc:
                raise ExperimentError(f"{method} on {' -> '.join(prefix)}: {exc}") from exc
            if method == "cl_slam":
                g = state.generalizer
                handoff_ok &= state.stored_depth.checksum() == g.depth.checksum()
                handoff_ok &= state.stored_pose.checksum() == g.pose.checksum()
            if method == "fixed":
                unchanged &= state.checksum() == base_state.checksum()
            state.expert = state.generalizer = None  # not needed past the deployment
            states[prefix] = state
            vo = result.trajectory(scene.timestamps)
            err = score(scene, result.accepted, vo, config)
            entry = {"vo": err, "accepted": len(result.accepted), "checksum": state.checksum()}
            if session is not None:
                slam = session.trajectory(scene.timestamps[result.accepted])
                entry["slam"] = score(scene, result.accepted, slam, config)
                entry["closures"] = len(session.closures)
            results[prefix] = entry
            timing[" -> ".join(prefix)] = result.runtime
            log.info("%s %s t_err=%.3f r_err=%.3f (%.1fs)", method, " -> ".join(prefix), err.t_err, err.r_err, result.runtime)
    return results, timing, handoff_ok, unchanged


def run_experiment(config: ExperimentConfig, methods=None, loops: bool | None = None) -> ReportTable:
    methods = tuple(methods or config.methods)
    loops = config.loop_closure.enabled if loops is None else loops
    started = time.perf_counter()
    plan = evaluation_plan(config)
    scenes = render_scenes(config)
    rendered = time.perf_counter()
    pair = network_pair(config)
    depth, pose = pretrained_weights(config, pair, scenes)
    base = DualState.initial(depth, pose, seed=derive_seed(config.seed, "replay") % (2**32))
    trained = time.perf_counter()
    table = ReportTable(config.hash(), config.seed, methods, plan)
    table.timing = {"render_s": rendered - started, "pretrain_s": trained - rendered, "deployments": {}}
    table.invariants["pretrained_checksum"] = base.checksum()
    for method in methods:
        results, timing, handoff_ok, unchanged = _deploy_chain(config, pair, base, scenes, method, plan, loops)
        table.timing["deployments"][method] = timing
        if method == "cl_slam":
            table.invariants["handoff"] = handoff_ok
        if method == "fixed":
            table.invariants["fixed_weights_unchanged"] = unchanged
        for seq in plan.sequences:
            entry = results[tuple(seq)]
            err = entry["slam"] if "slam" in entry else entry["vo"]
            t_hat, r_hat = remap_errors(err)
            row = {
                "method": method,
                "sequence": list(seq),
                "t_err": err.t_err,
                "r_err": err.r_err,
                "t_hat": t_hat,
                "r_hat": r_hat,
                "frames": entry["accepted"],
                "checksum": entry["checksum"],
            }
            if "slam" in entry:
                row["vo_t_err"] = entry["vo"].t_err
                row["vo_r_err"] = entry["vo"].r_err
                row["closures"] = entry["closures"]
            table.rows.append(row)
        errs = table.errors(method)
        aq = adaptation_quality(errs, plan.aq)
        agg = {"AQ_trans": aq.trans, "AQ_rot": aq.rot, "RQ_trans": None, "RQ_rot": None}
        if method != "fixed":
            rq = retention_quality(errs, plan.rq)
            agg.update(RQ_trans=rq.trans, RQ_rot=rq.rot)
        table.aggregate[method] = agg
    table.timing["total_s"] = time.perf_counter() - started
    return table


# --- report files ------------------------------------------------------------------------------


def report_json(table: ReportTable) -> str:
    return json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n"


def comparable(report: dict) -> dict:
    """The report without timing metadata, for reproducibility comparisons."""
    return {k: v for k, v in report.items() if k != TIMING_KEY}


def report_csv(table: ReportTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "sequence", "t_err", "r_err", "t_hat", "r_hat", "frames"])
    for r in table.rows:
        w.writerow([r["method"], " -> ".join(r["sequence"]), repr(r["t_err"]), repr(r["r_err"]),
                    repr(r["t_hat"]), repr(r["r_hat"]), r["frames"]])
    return buf.getvalue()


def report_text(table: ReportTable) -> str:
    """Sequences as rows (use, previous scenes, current scene), methods as column pairs."""
    plan = table.plan
    use = {}
    for s in plan.aq:
        use.setdefault(tuple(s), "AQ")
    for m, r in plan.rq:
        use.setdefault(tuple(m), "RQ")
        use.setdefault(tuple(r), "RQ-ref")
    head = f"{'use':<7}{'previous scenes':<34}{'current':<10}"
    head += "".join(f"{m:>22}" for m in table.methods)
    sub = " " * 51 + "".join(f"{'t_err':>11}{'r_err':>11}" for _ in table.methods)
    lines = [head, sub, "-" * len(sub)]
    for seq, kind in use.items():
        prev = " -> ".join(seq[:-1])
        line = f"{kind:<7}{prev:<34}{seq[-1]:<10}"
        for m in table.methods:
            r = table.row(m, seq)
            line += f"{r['t_err']:>11.2f}{r['r_err']:>11.2f}"
        lines.append(line)
    lines.append("")
    lines.append(f"{'method':<16}{'AQ_trans':>10}{'AQ_rot':>10}{'RQ_trans':>12}{'RQ_rot':>12}")
    for m in table.methods:
        a = table.aggregate[m]
        fmt = lambda v, w: f"{v:>{w}.4f}" if v is not None else f"{'--':>{w}}"
        lines.append(f"{m:<16}{fmt(a['AQ_trans'], 10)}{fmt(a['AQ_rot'], 10)}{fmt(a['RQ_trans'], 12)}{fmt(a['RQ_rot'], 12)}")
    lines.append(f"config {table.config_hash}  seed {table.seed}")
    return "\n".join(lines) + "\n"


def emit_report(table: ReportTable, directory, formats=("json", "csv", "txt")) -> dict[str, Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    writers = {"json": report_json, "csv": report_csv, "txt": report_text}
    paths = {}
    for fmt in formats:
        if fmt not in writers:
            raise ValueError(f"unknown report format {fmt!r}")
        path = out / f"report.{fmt}"
        path.write_text(writers[fmt](table))
        paths[fmt] = path
    return paths


def load_report(path) -> ReportTable:
    return ReportTable.from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "ExperimentError",
    "ReportTable",
    "comparable",
    "emit_report",
    "evaluation_plan",
    "load_report",
    "network_pair",
    "pretrained_weights",
    "render_scenes",
    "report_csv",
    "report_json",
    "report_text",
    "run_experiment",
    "score",
]
