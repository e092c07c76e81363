"""Configuration dataclasses, profile files, and seeded RNG streams.

Profiles are flat ``key = value`` files with ``[section]`` headers
(configparser syntax).  Every field has an embedded default so an empty
profile is valid; ``dump_profile`` writes the fully resolved config back
out for reproducibility.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

# Fixed stream ids so adding a stream never perturbs existing ones.
_STREAM_IDS = {
    "world": 0,
    "agent": 1,
    "eval": 2,
    "init": 3,
    "curriculum": 4,
}


def named_rng(master_seed: int, name: str) -> np.random.Generator:
    """Derive an independent generator for a named subsystem stream."""
    try:
        sub = _STREAM_IDS[name]
    except KeyError:
        raise ValueError(f"unknown rng stream {name!r}") from None
    return np.random.default_rng(np.random.SeedSequence((int(master_seed), sub)))


@dataclass
class WorldConfig:
    workspace_w: float = 0.448          # m
    workspace_h: float = 0.448          # m
    object_height: float = 0.03         # uniform block height, m
    overlap_tol: float = 1e-4           # max allowed interpenetration depth, m
    move_tol: float = 1e-3              # pose delta that counts as "moved", m
    push_radius: float = 0.01           # pusher disc radius, m
    push_length: float = 0.1            # default sweep length, m
    push_substeps: int = 20
    push_iters: int = 8                 # propagation passes per substep
    gripper_half_width: float = 0.045   # finger centre offset from grasp point, m
    finger_len: float = 0.024           # finger footprint along gripper axis, m
    finger_wid: float = 0.012           # finger footprint along closing axis, m
    grasp_depth: float = 0.01           # z below object surface, m
    push_z: float = 0.005               # push height above table, m
    spawn_max_attempts: int = 200


@dataclass
class PerceptConfig:
    grid: int = 64                      # H = W
    resolution: float = 0.007           # m / pixel (64 px * 7 mm = 0.448 m)
    border_radius: int = 4              # px, band around the goal mask
    push_dilate_radius: int = 4         # px, valid-push region around masks
    height_thresh: float = 0.005        # m, occupancy threshold


@dataclass
class ArchConfig:
    in_channels: int = 4                # RGB + depth
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    decoder_channels: tuple[int, ...] = (16, 16, 8)
    kernel: int = 3
    leaky_slope: float = 0.125   # power of two: the fast grad path stays exact
    n_rotations: int = 16


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    huber_kappa: float = 1.0


@dataclass
class AgentConfig:
    gamma: float = 0.5
    epsilon_initial: float = 0.5
    epsilon_final: float = 0.1
    epsilon_decay_steps: int = 800
    q_push_threshold: float = 0.5       # forced pre-grasp push below this
    tau_eta: float = 0.1                # border-occupancy gain threshold
    replay_capacity: int = 4000
    replay_alpha: float = 0.6
    replay_beta_initial: float = 0.4
    replay_beta_final: float = 1.0
    replay_beta_steps: int = 800
    priority_eps: float = 1e-3
    batch_size: int = 4
    target_sync_period: int = 100


@dataclass
class StageConfig:
    stage: int = 1
    n_objects: int = 10                 # stage 1
    n_goal_candidates: int = 7          # stage 2
    n_obstacles: int = 23               # stage 2
    steps: int = 3000
    scatter_threshold: float = 0.03     # m, stage-1 push reward gate
    reward_grasp: float = 1.0
    reward_push: float = 0.5
    stall_limit: int = 10               # consecutive no-change actions before reset
    cluster_radius: float = 0.0         # spawn within this radius of centre (0 = whole workspace)
    min_objects: int = 2                # stage-1 reset when fewer remain


@dataclass
class EvalConfig:
    n_runs: int = 30
    motion_cap: int = 30
    max_consecutive_failures: int = 10
    epsilon: float = 0.05               # evaluation exploration noise
    forced_push: bool = True            # apply the q_push_threshold rule at eval
    nongoal_grasp_is_failure: bool = True


@dataclass
class Profile:
    """Everything a run needs, resolvable from one file + a master seed."""

    world: WorldConfig = field(default_factory=WorldConfig)
    percept: PerceptConfig = field(default_factory=PerceptConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(
        stage=1, n_objects=10, steps=3000))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        stage=2, n_goal_candidates=7, n_obstacles=23, steps=5000))
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "world": "world",
    "percept": "percept",
    "arch": "arch",
    "optim": "optim",
    "agent": "agent",
    "stage1": "stage1",
    "stage2": "stage2",
    "eval": "eval",
}


class ConfigError(ValueError):
    pass


def _parse_value(current, text: str):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected boolean, got {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts)
    return text


def load_profile(path: str) -> Profile:
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    return profile_from_parser(parser)


def profile_from_parser(parser: configparser.ConfigParser) -> Profile:
    prof = Profile()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown profile section [{section}]")
        target = getattr(prof, _SECTIONS[section])
        for key, raw in parser.items(section):
            if not hasattr(target, key):
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _parse_value(getattr(target, key), raw))
    return prof


def dump_profile(prof: Profile) -> str:
    out = io.StringIO()
    for section, attr in _SECTIONS.items():
        obj = getattr(prof, attr)
        out.write(f"[{section}]\n")
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if isinstance(val, tuple):
                val = " ".join(str(v) for v in val)
            out.write(f"{f.name} = {val}\n")
        out.write("\n")
    return out.getvalue()
