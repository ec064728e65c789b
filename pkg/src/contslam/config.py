"""Experiment configuration: dataclasses plus a YAML loader.

Keys (all optional except ``environments``, ``pretrain`` and ``scenes``)::

    seed: 0                     # master seed; every RNG below derives from it
    output: runs/default        # output directory
    methods: [fixed, expert_only, general_only, cl_slam, offline]
    camera: {fx, fy, cx, cy, width, height}
    network: {downsample: 4, widths: [8, 16]}
    environments:               # list of EnvironmentSpec fields
      - {env_id: P, texture_seed: 1, speed: [4, 6], ...}
    pretrain: {env: P, scenes: [{scene_id: p1, length: 80}], epochs: 5, lr: 1e-3, batch_size: 4}
    scenes:                     # deployment scenes per environment, in deployment order
      A: [{scene_id: a1, length: 40}, {scene_id: a2, length: 40}]
    adaptation: {cycles: 5, lr: 1e-3, min_distance: 0.2, replay_per_env: 1}
    loss: {smoothness: 0.001, velocity: 0.05}
    loop_closure: {enabled: false, threshold: 0.95, min_gap: 50}
    evaluation: {lengths: [10, 20, 40], step: 1, median_scaling: false}

Scene ``seed`` values are salts: the seed used for rendering is derived from the
master seed, the scene id and the salt, so changing ``seed`` changes every scene.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .adaptation import MODES, AdaptationConfig
from .geometry import CameraIntrinsics
from .photometric import LossWeights
from .simworld import DEFAULT_CAMERA, EnvironmentSpec, SceneSpec


class ConfigError(ValueError):
    pass


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from the master seed and a key path."""
    text = json.dumps([int(master), *[str(k) for k in keys]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class PretrainConfig:
    env: str
    scenes: tuple
    epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 4


@dataclass(frozen=True)
class LoopConfig:
    enabled: bool = False
    threshold: float = 0.95
    min_gap: int = 50


@dataclass(frozen=True)
class EvalConfig:
    lengths: tuple = (10.0, 20.0, 40.0)
    step: int = 1
    median_scaling: bool = False


@dataclass(frozen=True)
class NetworkConfig:
    downsample: int = 4
    widths: tuple = (8, 16)


@dataclass(frozen=True)
class ExperimentConfig:
    environments: tuple
    pretrain: PretrainConfig
    scenes: dict  # env_id -> tuple of SceneSpec
    adaptation: AdaptationConfig = AdaptationConfig(lr=1e-3)
    loss: LossWeights = LossWeights()
    loop_closure: LoopConfig = LoopConfig()
    evaluation: EvalConfig = EvalConfig()
    network: NetworkConfig = NetworkConfig()
    camera: CameraIntrinsics = DEFAULT_CAMERA
    methods: tuple = ("fixed", "expert_only", "general_only", "cl_slam", "offline")
    seed: int = 0
    output: str = "runs/default"

    def __post_init__(self):
        envs = {e.env_id for e in self.environments}
        if len(envs) != len(self.environments):
            raise ConfigError("duplicate environment ids")
        if self.pretrain.env not in envs:
            raise ConfigError(f"pre-training environment {self.pretrain.env!r} is not defined")
        if not self.pretrain.scenes:
            raise ConfigError("pre-training needs at least one scene")
        for env_id in self.scenes:
            if env_id not in envs:
                raise ConfigError(f"scenes reference undefined environment {env_id!r}")
        ids = [s.scene_id for s in self.pretrain.scenes] + [s.scene_id for v in self.scenes.values() for s in v]
        if len(set(ids)) != len(ids):
            raise ConfigError("scene ids must be unique")
        for m in self.methods:
            if m not in MODES:
                raise ConfigError(f"unknown method {m!r}")

    def environment(self, env_id: str) -> EnvironmentSpec:
        for e in self.environments:
            if e.env_id == env_id:
                return e
        raise KeyError(env_id)

    def with_overrides(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        def conv(x):
            if dataclasses.is_dataclass(x):
                return {f.name: conv(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, dict):
                return {k: conv(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [conv(v) for v in x]
            return x

        return conv(self)

    def hash(self) -> str:
        """Digest of every setting except the output directory."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**_tuples(data))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    for key in ("environments", "pretrain", "scenes"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    envs = tuple(_build(EnvironmentSpec, e, f"environments[{i}]") for i, e in enumerate(data["environments"]))
    pre = dict(data["pretrain"])
    pre["scenes"] = tuple(_build(SceneSpec, s, "pretrain.scenes") for s in pre.get("scenes", ()))
    pretrain = _build(PretrainConfig, pre, "pretrain")
    if not isinstance(data["scenes"], dict):
        raise ConfigError("scenes: expected a mapping from environment id to scene list")
    scenes = {
        env: tuple(_build(SceneSpec, s, f"scenes.{env}") for s in specs) for env, specs in data["scenes"].items()
    }
    kw = {}
    if "camera" in data:
        kw["camera"] = _build(CameraIntrinsics, data["camera"], "camera")
    for key, cls in (
        ("adaptation", AdaptationConfig),
        ("loss", LossWeights),
        ("loop_closure", LoopConfig),
        ("evaluation", EvalConfig),
        ("network", NetworkConfig),
    ):
        if key in data:
            kw[key] = _build(cls, data[key], key)
    for key in ("methods",):
        if key in data:
            kw[key] = tuple(data[key])
    for key in ("seed", "output"):
        if key in data:
            kw[key] = data[key]
    try:
        return ExperimentConfig(envs, pretrain, scenes, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def scene_seed(config: ExperimentConfig, scene: SceneSpec) -> SceneSpec:
    """The scene spec with its salt replaced by the seed derived from the master seed."""
    return dataclasses.replace(scene, seed=derive_seed(config.seed, "scene", scene.scene_id, scene.seed) % (2**32))


def environment_seed(config: ExperimentConfig, env: EnvironmentSpec) -> EnvironmentSpec:
    return dataclasses.replace(
        env, texture_seed=derive_seed(config.seed, "env", env.env_id, env.texture_seed) % (2**32)
    )


__all__ = [
    "ConfigError",
    "EvalConfig",
    "ExperimentConfig",
    "LoopConfig",
    "NetworkConfig",
    "PretrainConfig",
    "config_from_dict",
    "derive_seed",
    "environment_seed",
    "load_config",
    "scene_seed",
]
