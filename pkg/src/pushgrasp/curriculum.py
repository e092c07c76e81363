"""Two-stage training: goal-agnostic grasping first, then goal-oriented
push-grasp synergy, with stage-specific rewards and scene management.

Stage 1 spawns scattered objects and rewards any successful grasp (1.0)
or any push that scatters objects (0.5).  Stage 2 spawns clutter, assigns
goal objects one after another, rewards goal grasps (1.0) and pushes that
free up the goal's border band (0.5 when the occupancy drop exceeds tau).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import agent as agent_mod
from . import percept, qfunc, world
from .agent import ActionSpec, ReplayBuffer, Transition
from .config import Profile, StageConfig, dump_profile, named_rng, profile_from_parser
from .percept import Heightmap, SegMap
from .world import Scene, StepOutcome


class CheckpointError(IOError):
    pass


# ---------------------------------------------------------------------------
# rewards


def reward_stage1(outcome: StepOutcome, scatter: float, scatter_threshold: float,
                  r_grasp: float = 1.0, r_push: float = 0.5) -> float:
    """Any successful grasp earns r_grasp; a push that scatters earns r_push."""
    if outcome.primitive == "grasp":
        return r_grasp if outcome.success else 0.0
    return r_push if scatter > scatter_threshold else 0.0


def reward_stage2(outcome: StepOutcome, goal_id: int, eta: float, tau: float,
                  r_grasp: float = 1.0, r_push: float = 0.5) -> float:
    """Only grasping the goal earns r_grasp; a push earns r_push when it
    frees border space faster than tau."""
    if outcome.primitive == "grasp":
        return r_grasp if (outcome.success and outcome.grasped_id == goal_id) else 0.0
    return r_push if eta > tau else 0.0


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    profile: Profile
    stage: int
    step: int
    params: qfunc.NetworkParams
    target_params: qfunc.NetworkParams
    adam: qfunc.AdamState
    buffer: ReplayBuffer
    rng_world: np.random.Generator
    rng_agent: np.random.Generator
    rng_curriculum: np.random.Generator
    scene: Scene | None = None
    goal_id: int | None = None
    stall: int = 0
    recent: list = field(default_factory=list)   # (step, primitive, success) tail window

    @classmethod
    def fresh(cls, profile: Profile, stage: int, seed: int,
              params: qfunc.NetworkParams | None = None) -> "TrainState":
        if params is None:
            params = qfunc.init_params(seed, profile.arch)
        a = profile.agent
        return cls(
            profile=profile,
            stage=stage,
            step=0,
            params=params,
            target_params=params.copy(),
            adam=qfunc.AdamState.zeros(params),
            buffer=ReplayBuffer(a.replay_capacity, a.replay_alpha, a.priority_eps),
            rng_world=named_rng(seed, "world"),
            rng_agent=named_rng(seed, "agent"),
            rng_curriculum=named_rng(seed, "curriculum"),
        )


RECENT_WINDOW = 200


def trailing_grasp_success(recent: list, window: int, upto_step: int) -> float | None:
    """Grasp success over the last ``window`` steps; None without attempts."""
    lo = upto_step - window
    attempts = [s for (st, prim, s) in recent if prim == "grasp" and st >= lo]
    if not attempts:
        return None
    return sum(attempts) / len(attempts)


# ---------------------------------------------------------------------------
# the stage loop


def _spawn_for_stage(cfg: StageConfig, state: TrainState) -> Scene:
    wcfg = state.profile.world
    center = None
    if cfg.cluster_radius > 0:
        # wander the clutter around the table so edges and corners are
        # part of the training distribution
        inset = 0.06
        center = (float(state.rng_world.uniform(inset, wcfg.workspace_w - inset)),
                  float(state.rng_world.uniform(inset, wcfg.workspace_h - inset)))
    if cfg.stage == 1:
        return world.spawn_random(0, cfg.n_objects, state.rng_world, wcfg,
                                  cluster_radius=cfg.cluster_radius,
                                  cluster_center=center)
    return world.spawn_random(cfg.n_goal_candidates, cfg.n_obstacles,
                              state.rng_world, wcfg,
                              cluster_radius=cfg.cluster_radius,
                              cluster_center=center)


def _pick_goal(scene: Scene, rng: np.random.Generator) -> int | None:
    candidates = [o.id for o in scene.objects if o.is_goal_candidate]
    if not candidates:
        return None
    return int(candidates[int(rng.integers(len(candidates)))])


def _execute(scene: Scene, action: ActionSpec, wcfg) -> StepOutcome:
    x, y, _z, theta = action.world
    if action.primitive == "grasp":
        return world.apply_grasp(scene, (x, y), theta, wcfg)
    return world.apply_push(scene, (x, y), theta, wcfg.push_length, wcfg)


def run_stage(cfg: StageConfig, state: TrainState, log_path: str | None = None,
              stop_success: float | None = None,
              stop_window: int = 100) -> TrainState:
    """Run one training stage; mutates and returns ``state``.

    ``stop_success`` ends the stage early once the trailing-``stop_window``
    grasp success reaches the threshold (with at least 20 attempts).
    """
    prof = state.profile
    acfg, ocfg, pcfg, wcfg = prof.agent, prof.optim, prof.percept, prof.world
    mode = "agnostic" if cfg.stage == 1 else "oriented"
    radius = pcfg.push_dilate_radius

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        while state.step < cfg.steps:
            # scene / goal lifecycle
            if state.scene is None:
                state.scene = _spawn_for_stage(cfg, state)
                state.stall = 0
                state.goal_id = _pick_goal(state.scene, state.rng_curriculum) \
                    if cfg.stage == 2 else None
                if log_fh is not None:
                    text = world.scene_to_text(state.scene)
                    log_fh.write(json.dumps(
                        {"respawn": {"step": state.step, "scene": text,
                                     "hash": world.scene_hash(state.scene)}},
                        sort_keys=True, separators=(",", ":")) + "\n")

            scene = state.scene
            hmap, seg = percept.render(scene, pcfg.resolution)
            obj_mask = percept.object_mask(seg)
            goal = None
            if cfg.stage == 2:
                try:
                    goal = percept.goal_mask(seg, state.goal_id)
                except percept.MissingGoalError:
                    # goal somehow invisible (degenerate render): reassign
                    state.scene = None
                    continue
            if not obj_mask.any():
                state.scene = None
                continue

            x_in = percept.net_input(hmap)
            epsilon = agent_mod.epsilon_at(state.step, acfg)
            if state.rng_agent.uniform() < epsilon:
                prim, k, u, v = agent_mod.explore_action(
                    obj_mask, goal, state.rng_agent, radius)
                explored, q_value = True, float("nan")
            else:
                qmaps = agent_mod.forward_all_rotations(state.params, x_in)
                masked = agent_mod.masked_qmaps(qmaps, obj_mask, goal, radius)
                (prim, k, u, v), explored, q_value = agent_mod.select_action(
                    masked, mode, acfg, state.rng_agent, 0.0,
                    obj_mask, goal, radius)
            action = agent_mod.make_action(prim, k, u, v, hmap, wcfg)

            # border stats before a stage-2 push
            mr_before = mr_after = eta_value = None
            border = None
            if cfg.stage == 2 and prim == "push":
                border = percept.border_mask(goal, pcfg.border_radius)
                mr_before = percept.border_occupancy(
                    border, hmap, pcfg.height_thresh).m_r

            outcome = _execute(scene, action, wcfg)
            next_scene = outcome.scene_after
            next_hmap, next_seg = percept.render(next_scene, pcfg.resolution)

            scatter = 0.0
            if prim == "push":
                scatter = world.scatter_metric(scene, next_scene, wcfg)

            if cfg.stage == 1:
                reward = reward_stage1(outcome, scatter, cfg.scatter_threshold,
                                       cfg.reward_grasp, cfg.reward_push)
            else:
                if prim == "push":
                    after_stats = percept.border_occupancy(
                        border, next_hmap, pcfg.height_thresh)
                    mr_after = after_stats.m_r
                    eta_value = mr_before - mr_after
                reward = reward_stage2(outcome, state.goal_id,
                                       eta_value if eta_value is not None else 0.0,
                                       acfg.tau_eta,
                                       cfg.reward_grasp, cfg.reward_push)

            # stall and episode accounting
            changed = (outcome.primitive == "grasp" and outcome.success) or \
                      (outcome.primitive == "push" and scatter > wcfg.move_tol)
            state.stall = 0 if changed else state.stall + 1

            # stage 2 treats a goal grasp as completing the subtask (no
            # bootstrap); stage-1 grasps keep the bootstrap so grasping
            # stays preferred over pushing by the full reward margin
            goal_grasped = (cfg.stage == 2 and prim == "grasp" and outcome.success
                            and outcome.grasped_id == state.goal_id)
            terminal = goal_grasped \
                or state.stall >= cfg.stall_limit \
                or (cfg.stage == 1 and len(next_scene.objects) < cfg.min_objects)

            state.buffer.insert(Transition(
                height=hmap.height, color=hmap.color, seg=seg.ids,
                goal_id=state.goal_id,
                action=(prim, k, u, v), reward=reward,
                next_height=next_hmap.height, next_color=next_hmap.color,
                next_seg=next_seg.ids, terminal=terminal,
            ))

            state.params, state.adam, loss = agent_mod.learn_step(
                state.params, state.target_params, state.adam, state.buffer,
                acfg, ocfg, pcfg, state.rng_agent, state.step)
            if (state.step + 1) % acfg.target_sync_period == 0:
                state.target_params = agent_mod.sync_target(state.params)

            # advance the scene; terminal transitions do not always reset
            if state.stall >= cfg.stall_limit:
                state.scene = None
                state.stall = 0
            elif cfg.stage == 1:
                state.scene = None if len(next_scene.objects) < cfg.min_objects \
                    else next_scene
            elif goal_grasped:
                # keep grasping in the same scene while candidates remain,
                # otherwise drop everything and respawn
                nxt = _pick_goal(next_scene, state.rng_curriculum)
                if nxt is None:
                    state.scene = None
                else:
                    state.scene = next_scene
                    state.goal_id = nxt
            else:
                state.scene = next_scene

            state.recent.append((state.step, prim, 1 if
                                 (prim == "grasp" and outcome.success) else 0))
            if len(state.recent) > RECENT_WINDOW:
                state.recent = state.recent[-RECENT_WINDOW:]

            if log_fh is not None:
                log_fh.write(agent_mod.log_record(
                    state.step, cfg.stage, mode, state.goal_id, action,
                    explored, epsilon, reward, loss,
                    outcome.success, outcome.grasped_id, outcome.moved_ids,
                    round(scatter, 9), eta_value, mr_before, mr_after, terminal,
                    world.scene_hash(next_scene), q_value) + "\n")

            state.step += 1

            if stop_success is not None:
                rate = trailing_grasp_success(state.recent, stop_window, state.step)
                n_attempts = sum(1 for (st, p, _s) in state.recent
                                 if p == "grasp" and st >= state.step - stop_window)
                if rate is not None and n_attempts >= 20 and rate >= stop_success:
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PGTS"
_VERSION = 1


def _pack_blob(out: io.BytesIO, data: bytes):
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _unpack_blob(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def _rng_state_json(state: TrainState) -> bytes:
    d = {
        "world": state.rng_world.bit_generator.state,
        "agent": state.rng_agent.bit_generator.state,
        "curriculum": state.rng_curriculum.bit_generator.state,
    }
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()


def _buffer_to_bytes(buf: ReplayBuffer) -> bytes:
    out = io.BytesIO()
    n = len(buf.items)
    if n:
        h, w = buf.items[0].height.shape
    else:
        h = w = 0
    out.write(struct.pack("<IIHHdd", n, buf._next, h, w, buf.alpha, buf.priority_eps))
    out.write(struct.pack("<I", buf.capacity))
    out.write(np.ascontiguousarray(buf.priorities[:n], dtype="<f8").tobytes())
    for tr in buf.items:
        prim, k, u, v = tr.action
        out.write(struct.pack("<bBHHdb", 1 if tr.terminal else 0,
                              agent_mod.PRIMITIVES.index(prim), u, v,
                              tr.reward, 1 if tr.goal_id is not None else 0))
        out.write(struct.pack("<iB", tr.goal_id if tr.goal_id is not None else -1, k))
        for arr, dt in ((tr.height, "<f4"), (tr.color, "u1"), (tr.seg, "<i2"),
                        (tr.next_height, "<f4"), (tr.next_color, "u1"),
                        (tr.next_seg, "<i2")):
            out.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return out.getvalue()


def _buffer_from_bytes(data: bytes) -> ReplayBuffer:
    fh = io.BytesIO(data)
    n, nxt, h, w, alpha, prio_eps = struct.unpack(
        "<IIHHdd", _read_exact(fh, struct.calcsize("<IIHHdd")))
    (capacity,) = struct.unpack("<I", _read_exact(fh, 4))
    buf = ReplayBuffer(capacity, alpha, prio_eps)
    buf._next = nxt
    prios = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
    buf.priorities[:n] = prios
    plane = h * w
    for _ in range(n):
        term, prim_i, u, v, reward, has_goal = struct.unpack(
            "<bBHHdb", _read_exact(fh, struct.calcsize("<bBHHdb")))
        goal_id, k = struct.unpack("<iB", _read_exact(fh, struct.calcsize("<iB")))
        height = np.frombuffer(_read_exact(fh, 4 * plane), dtype="<f4").reshape(h, w).copy()
        color = np.frombuffer(_read_exact(fh, plane), dtype="u1").reshape(h, w).copy()
        seg = np.frombuffer(_read_exact(fh, 2 * plane), dtype="<i2").reshape(h, w).copy()
        nheight = np.frombuffer(_read_exact(fh, 4 * plane), dtype="<f4").reshape(h, w).copy()
        ncolor = np.frombuffer(_read_exact(fh, plane), dtype="u1").reshape(h, w).copy()
        nseg = np.frombuffer(_read_exact(fh, 2 * plane), dtype="<i2").reshape(h, w).copy()
        buf.items.append(Transition(
            height=height, color=color, seg=seg,
            goal_id=goal_id if has_goal else None,
            action=(agent_mod.PRIMITIVES[prim_i], k, u, v),
            reward=reward,
            next_height=nheight, next_color=ncolor, next_seg=nseg,
            terminal=bool(term),
        ))
    return buf


def save_checkpoint(state: TrainState, path: str, include_replay: bool = True):
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(struct.pack("<I", _VERSION))
    out.write(struct.pack("<BBqi",
                          1 if include_replay else 0,
                          state.stage,
                          state.step,
                          state.goal_id if state.goal_id is not None else -1))
    out.write(struct.pack("<I", state.stall))
    _pack_blob(out, dump_profile(state.profile).encode())
    scene_text = world.scene_to_text(state.scene) if state.scene is not None else ""
    _pack_blob(out, scene_text.encode())
    _pack_blob(out, qfunc.params_to_blob(state.params, state.adam))
    _pack_blob(out, qfunc.params_to_blob(state.target_params))
    _pack_blob(out, _rng_state_json(state))
    _pack_blob(out, json.dumps(state.recent, sort_keys=True,
                               separators=(",", ":")).encode())
    if include_replay:
        _pack_blob(out, _buffer_to_bytes(state.buffer))
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path: str) -> TrainState:
    import configparser

    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise CheckpointError("bad magic: not a training checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        has_replay, stage, step, goal_id = struct.unpack(
            "<BBqi", _read_exact(fh, struct.calcsize("<BBqi")))
        (stall,) = struct.unpack("<I", _read_exact(fh, 4))
        parser = configparser.ConfigParser()
        parser.read_string(_unpack_blob(fh).decode())
        profile = profile_from_parser(parser)
        scene_text = _unpack_blob(fh).decode()
        try:
            params, adam = qfunc.params_from_blob(_unpack_blob(fh))
            target_params, _ = qfunc.params_from_blob(_unpack_blob(fh))
        except qfunc.CheckpointError as exc:
            raise CheckpointError(str(exc)) from exc
        rng_states = json.loads(_unpack_blob(fh).decode())
        recent = [tuple(r) for r in json.loads(_unpack_blob(fh).decode())]
        buffer = None
        if has_replay:
            buffer = _buffer_from_bytes(_unpack_blob(fh))

    if adam is None:
        raise CheckpointError("training checkpoint is missing optimizer state")
    acfg = profile.agent
    if buffer is None:
        buffer = ReplayBuffer(acfg.replay_capacity, acfg.replay_alpha, acfg.priority_eps)

    def restore(name):
        gen = np.random.default_rng()
        gen.bit_generator.state = rng_states[name]
        return gen

    return TrainState(
        profile=profile,
        stage=stage,
        step=step,
        params=params,
        target_params=target_params,
        adam=adam,
        buffer=buffer,
        rng_world=restore("world"),
        rng_agent=restore("agent"),
        rng_curriculum=restore("curriculum"),
        scene=world.scene_from_text(scene_text) if scene_text else None,
        goal_id=goal_id if goal_id >= 0 else None,
        stall=stall,
        recent=recent,
    )
