"""Evaluation: arrangements, episode execution, and the benchmark metrics.

Random arrangements mirror the training distribution; challenge cases are
ten authored adversarial scenes (side-by-side rows and closed rings)
where the goal is not graspable until something moves.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, field

import numpy as np

from . import agent as agent_mod
from . import percept, qfunc, world
from .agent import ActionSpec
from .config import EvalConfig, Profile
from .world import Scene

N_CHALLENGE_CASES = 10


class BenchError(Exception):
    pass


def gen_random_arrangement(n_objects: int, seed, mode: str,
                           profile: Profile,
                           cluster_radius: float = 0.0):
    """Random scene; oriented mode flags exactly one object as the goal."""
    if n_objects < 1:
        raise ValueError("need at least one object")
    if mode == "oriented":
        scene = world.spawn_random(1, n_objects - 1, seed, profile.world,
                                   cluster_radius=cluster_radius)
        return scene, 1
    scene = world.spawn_random(0, n_objects, seed, profile.world,
                               cluster_radius=cluster_radius)
    return scene, None


def challenge_case(case_id: int) -> tuple[Scene, int]:
    """Load one of the authored adversarial scenes."""
    if not 1 <= case_id <= N_CHALLENGE_CASES:
        raise BenchError(f"unknown challenge case {case_id}")
    ref = importlib.resources.files("pushgrasp") \
        .joinpath(f"data/challenge/case{case_id:02d}.scene")
    scene = world.scene_from_text(ref.read_text(encoding="utf-8"))
    goals = [o.id for o in scene.objects if o.is_goal_candidate]
    if len(goals) != 1:
        raise BenchError(f"case {case_id} must contain exactly one goal")
    return scene, goals[0]


def goal_grasp_infeasible(scene: Scene, goal_id: int, profile: Profile) -> bool:
    """True when no rotation can grasp the goal at its centroid."""
    obj = scene.get(goal_id)
    centroid = obj.world_vertices().mean(axis=0)
    for k in range(percept.N_ROTATIONS):
        out = world.apply_grasp(scene, centroid, k * np.pi / 8.0, profile.world)
        if out.success:
            return False
    return True


# ---------------------------------------------------------------------------
# greedy policy over a trained checkpoint


@dataclass
class QPolicy:
    """Greedy (epsilon-noised) policy over the network's masked Q maps.

    After each call ``last_heightmap`` and ``last_qmaps`` hold what the
    policy saw, which the episode runner uses for image dumps.
    """

    params: qfunc.NetworkParams
    profile: Profile
    epsilon: float = 0.0
    forced_push: bool = True
    grasp_only: bool = False
    last_heightmap: percept.Heightmap | None = None
    last_qmaps: qfunc.QMaps | None = None

    def __call__(self, scene: Scene, mode: str, goal_id: int | None,
                 rng: np.random.Generator) -> ActionSpec:
        pcfg = self.profile.percept
        acfg = self.profile.agent
        hmap, seg = percept.render(scene, pcfg.resolution)
        obj_mask = percept.object_mask(seg)
        goal = percept.goal_mask(seg, goal_id) if goal_id is not None else None
        radius = pcfg.push_dilate_radius
        self.last_heightmap = hmap
        self.last_qmaps = None

        if self.epsilon > 0 and rng.uniform() < self.epsilon:
            if self.grasp_only:
                region = goal if goal is not None else obj_mask
                valid = agent_mod.rotation_validity(*region.shape)
                k = int(rng.integers(percept.N_ROTATIONS))
                pick = valid[k] & region
                if not pick.any():
                    pick = region
                rows, cols = np.nonzero(pick)
                i = int(rng.integers(len(rows)))
                prim, u, v = "grasp", int(rows[i]), int(cols[i])
            else:
                prim, k, u, v = agent_mod.explore_action(obj_mask, goal, rng, radius)
            return agent_mod.make_action(prim, k, u, v, hmap, self.profile.world)

        x_in = percept.net_input(hmap)
        qmaps = agent_mod.forward_all_rotations(self.params, x_in)
        self.last_qmaps = qmaps
        masked = agent_mod.masked_qmaps(qmaps, obj_mask, goal, radius)
        if self.grasp_only:
            k, u, v, _ = agent_mod.argmax_single(masked.grasp)
            return agent_mod.make_action("grasp", k, u, v, hmap, self.profile.world)
        if mode == "oriented" and self.forced_push:
            (prim, k, u, v), _, _ = agent_mod.select_action(
                masked, "oriented", acfg, rng, 0.0, obj_mask, goal, radius)
        else:
            prim, k, u, v, _ = agent_mod.argmax_qmaps(masked)
        return agent_mod.make_action(prim, k, u, v, hmap, self.profile.world)


# ---------------------------------------------------------------------------
# episodes and metrics


@dataclass
class EpisodeRecord:
    arrangement: str
    mode: str
    goal_id: int | None
    completed: bool
    motions: int
    grasp_attempts: int
    grasp_successes: int
    pushes: int
    objects_grasped: int
    actions: list = field(default_factory=list)   # per-step dicts

    def to_json(self) -> dict:
        return {
            "arrangement": self.arrangement, "mode": self.mode,
            "goal_id": self.goal_id, "completed": self.completed,
            "motions": self.motions, "grasp_attempts": self.grasp_attempts,
            "grasp_successes": self.grasp_successes, "pushes": self.pushes,
            "objects_grasped": self.objects_grasped, "actions": self.actions,
        }


@dataclass
class Metrics:
    completion: float
    grasp_success: float
    motion_number: float
    action_efficiency: float

    def to_json(self) -> dict:
        return {
            "completion": self.completion, "grasp_success": self.grasp_success,
            "motion_number": self.motion_number,
            "action_efficiency": self.action_efficiency,
        }


def _dump_step_images(policy, dump_dir, step: int):
    import pathlib

    out = pathlib.Path(dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    hmap = getattr(policy, "last_heightmap", None)
    if hmap is not None:
        percept.write_pgm(hmap.height, str(out / f"step{step:03d}_height.pgm"))
    qmaps = getattr(policy, "last_qmaps", None)
    if qmaps is not None:
        lo = float(min(qmaps.grasp.min(), qmaps.push.min()))
        hi = float(max(qmaps.grasp.max(), qmaps.push.max()))
        span = (hi - lo) if hi > lo else 1.0
        for k in range(qmaps.grasp.shape[0]):
            percept.write_pgm((qmaps.grasp[k] - lo) / span,
                              str(out / f"step{step:03d}_qgrasp_k{k:02d}.pgm"),
                              scale=1.0)
            percept.write_pgm((qmaps.push[k] - lo) / span,
                              str(out / f"step{step:03d}_qpush_k{k:02d}.pgm"),
                              scale=1.0)


def run_episode(policy, scene: Scene, mode: str, goal_id: int | None = None,
                max_consecutive_failures: int = 10, motion_cap: int = 30,
                rng: np.random.Generator | None = None,
                arrangement: str = "", world_cfg=None,
                dump_dir: str | None = None) -> EpisodeRecord:
    """Drive a policy until success, too many failed grasps, or the cap.

    Pushes never count as failed attempts but do count as motions; the
    failure counter resets whenever a grasp succeeds.
    """
    if mode not in ("agnostic", "oriented"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "oriented" and goal_id is None:
        raise ValueError("oriented episodes need a goal id")
    rng = rng if rng is not None else np.random.default_rng(0)
    rec = EpisodeRecord(arrangement, mode, goal_id, False, 0, 0, 0, 0, 0)
    scene = scene.copy()
    consecutive_failures = 0

    while rec.motions < motion_cap:
        action = policy(scene, mode, goal_id, rng)
        if dump_dir is not None:
            _dump_step_images(policy, dump_dir, rec.motions)
        x, y, _z, theta = action.world
        if action.primitive == "grasp":
            outcome = world.apply_grasp(scene, (x, y), theta, world_cfg)
        else:
            outcome = world.apply_push(scene, (x, y), theta, cfg=world_cfg)
        rec.motions += 1
        rec.actions.append({
            "action": action.to_json(), "success": outcome.success,
            "grasped_id": outcome.grasped_id,
        })

        if action.primitive == "push":
            rec.pushes += 1
        else:
            rec.grasp_attempts += 1
            goal_grasped = outcome.success and (
                mode == "agnostic" or outcome.grasped_id == goal_id)
            if outcome.success:
                rec.objects_grasped += 1
            if goal_grasped:
                rec.grasp_successes += 1
                consecutive_failures = 0
            else:
                consecutive_failures += 1
                if consecutive_failures >= max_consecutive_failures:
                    return rec
        scene = outcome.scene_after

        if mode == "oriented":
            if action.primitive == "grasp" and outcome.success \
                    and outcome.grasped_id == goal_id:
                rec.completed = True
                return rec
        else:
            if not scene.objects:
                rec.completed = True
                return rec
    return rec


def compute_metrics(records: list[EpisodeRecord]) -> Metrics:
    if not records:
        raise ValueError("no episode records")
    completed = [r for r in records if r.completed]
    completion = len(completed) / len(records)
    if completed:
        rates = [r.grasp_successes / r.grasp_attempts
                 for r in completed if r.grasp_attempts > 0]
        grasp_success = float(np.mean(rates)) if rates else 0.0
        motion_number = float(np.mean([r.motions for r in completed]))
        agnostic = [r for r in completed if r.mode == "agnostic"]
        if agnostic:
            total_motions = sum(r.motions for r in agnostic)
            action_efficiency = sum(r.objects_grasped for r in agnostic) / total_motions
        else:
            # oriented runs: objects grasped per motion over completions
            action_efficiency = sum(r.objects_grasped for r in completed) / \
                sum(r.motions for r in completed)
    else:
        grasp_success = 0.0
        motion_number = 0.0
        action_efficiency = 0.0
    return Metrics(completion, grasp_success, motion_number, float(action_efficiency))


def write_results(path: str, records: list[EpisodeRecord], metrics: Metrics):
    with open(path, "w", encoding="utf-8") as fh:
        for i, rec in enumerate(records):
            fh.write(json.dumps({"episode": i, **rec.to_json()},
                                sort_keys=True, separators=(",", ":")) + "\n")
        fh.write(json.dumps({"metrics": metrics.to_json(),
                             "n_episodes": len(records)},
                            sort_keys=True, separators=(",", ":")) + "\n")
