"""Action selection over Q maps, Double DQN targets, prioritized replay.

The hierarchical trick: the network only ever sees goal-agnostic
observations; restricting the argmax to the goal mask turns the same Q
maps into a goal-oriented policy.  Masked-out pixels carry a -inf
sentinel so legitimately negative Q values stay selectable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import percept, qfunc
from .config import AgentConfig, OptimConfig, PerceptConfig, WorldConfig
from .percept import Heightmap, SegMap
from .qfunc import QMaps, forward_all_rotations

PRIMITIVES = ("push", "grasp")

NEG_INF = np.float32(-np.inf)


class AgentError(Exception):
    pass


class EmptySelectionError(AgentError):
    """No selectable pixel remains after masking."""


@dataclass
class ActionSpec:
    primitive: str
    pixel: tuple[int, int]          # (u, v) = (row, col)
    rotation: int                   # k, theta = k * pi / 8
    world: tuple[float, float, float, float]   # x, y, z, theta

    def to_json(self) -> dict:
        return {
            "primitive": self.primitive,
            "u": self.pixel[0], "v": self.pixel[1], "k": self.rotation,
            "x": self.world[0], "y": self.world[1],
            "z": self.world[2], "theta": self.world[3],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ActionSpec":
        return cls(d["primitive"], (d["u"], d["v"]), d["k"],
                   (d["x"], d["y"], d["z"], d["theta"]))


def make_action(primitive: str, k: int, u: int, v: int, hmap: Heightmap,
                world_cfg: WorldConfig) -> ActionSpec:
    x, y = percept.pixel_to_world(u, v, hmap.resolution, hmap.origin)
    theta = k * np.pi / 8.0
    if primitive == "grasp":
        z = max(float(hmap.height[u, v]) - world_cfg.grasp_depth, 0.0)
    else:
        z = world_cfg.push_z
    return ActionSpec(primitive, (u, v), k, (x, y, z, theta))


# ---------------------------------------------------------------------------
# rotation pipeline


_VALIDITY_CACHE: dict[tuple[int, int], np.ndarray] = {}


def rotation_validity(h: int, w: int) -> np.ndarray:
    """(16, H, W) bool: pixels whose Q value survives the inverse rotation.

    Corner pixels fall outside the rotated frame for non-axis rotations;
    their inverse-rotated Q would be the zero fill, so they are never
    selectable at those rotations.
    """
    key = (h, w)
    out = _VALIDITY_CACHE.get(key)
    if out is None:
        out = np.empty((percept.N_ROTATIONS, h, w), dtype=bool)
        for k in range(percept.N_ROTATIONS):
            if k % 4 == 0:
                out[k] = True
            else:
                _, _, valid = percept._rotation_index_map(h, w, k, sign=-1)
                out[k] = valid
        _VALIDITY_CACHE[key] = out
    return out


def rotated_pixel(u: int, v: int, k: int, h: int, w: int) -> tuple[int, int, bool]:
    """Rotated-frame pixel whose Q value lands at unrotated (u, v)."""
    if k % percept.N_ROTATIONS == 0:
        return u, v, True
    src_i, src_j, valid = percept._rotation_index_map(h, w, k, sign=-1)
    return int(src_i[u, v]), int(src_j[u, v]), bool(valid[u, v])


# ---------------------------------------------------------------------------
# masking and selection


def masked_qmaps(q: QMaps, object_mask: np.ndarray,
                 goal: np.ndarray | None = None,
                 push_dilate_radius: int = 4) -> QMaps:
    """Confine the grasp maps to the target region and the push maps to
    its dilation; everything else becomes -inf."""
    region = goal if goal is not None else object_mask
    if region.shape != q.grasp.shape[1:]:
        raise ValueError("mask shape does not match Q maps")
    if not region.any():
        raise EmptySelectionError("no selectable pixel in the target region")
    push_region = percept.dilate(region, push_dilate_radius)
    valid = rotation_validity(*region.shape)
    grasp = np.where(valid & region[None], q.grasp, NEG_INF)
    push = np.where(valid & push_region[None], q.push, NEG_INF)
    return QMaps(grasp=grasp, push=push)


def argmax_qmaps(masked: QMaps):
    """(primitive, k, u, v, value) of the best action; ties resolve to the
    lowest (primitive, k, u, v) index, push before grasp."""
    stacked = np.stack([masked.push, masked.grasp])
    flat = int(np.argmax(stacked))
    value = float(stacked.reshape(-1)[flat])
    if value == -np.inf:
        raise EmptySelectionError("all pixels masked out")
    pi, k, u, v = np.unravel_index(flat, stacked.shape)
    return PRIMITIVES[pi], int(k), int(u), int(v), value


def argmax_single(maps: np.ndarray):
    flat = int(np.argmax(maps))
    value = float(maps.reshape(-1)[flat])
    if value == -np.inf:
        raise EmptySelectionError("all pixels masked out")
    k, u, v = np.unravel_index(flat, maps.shape)
    return int(k), int(u), int(v), value


def explore_action(object_mask: np.ndarray, goal: np.ndarray | None,
                   rng: np.random.Generator,
                   push_dilate_radius: int = 4):
    """Uniform (primitive, rotation, pixel) over the primitive's valid region."""
    region = goal if goal is not None else object_mask
    if not region.any():
        raise EmptySelectionError("cannot explore an empty mask")
    primitive = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
    k = int(rng.integers(percept.N_ROTATIONS))
    if primitive == "push":
        region = percept.dilate(region, push_dilate_radius)
    valid = rotation_validity(*region.shape)[k] & region
    if not valid.any():
        valid = region          # degenerate corner case: ignore frame loss
    rows, cols = np.nonzero(valid)
    i = int(rng.integers(len(rows)))
    return primitive, k, int(rows[i]), int(cols[i])


def select_action(masked: QMaps, mode: str, cfg: AgentConfig,
                  rng: np.random.Generator, epsilon: float,
                  object_mask: np.ndarray, goal: np.ndarray | None,
                  push_dilate_radius: int = 4):
    """Epsilon-greedy hierarchical selection.

    Returns ((primitive, k, u, v), explored, q_value).  In oriented mode a
    weak best-grasp estimate (below ``cfg.q_push_threshold``) forces a
    pre-grasping push regardless of the push map's own maximum.
    """
    if mode not in ("agnostic", "oriented"):
        raise ValueError(f"unknown mode {mode!r}")
    if epsilon > 0 and rng.uniform() < epsilon:
        prim, k, u, v = explore_action(object_mask, goal, rng, push_dilate_radius)
        return (prim, k, u, v), True, float("nan")

    if mode == "oriented":
        grasp_max = float(masked.grasp.max())
        if grasp_max < cfg.q_push_threshold:
            k, u, v, value = argmax_single(masked.push)
            return ("push", k, u, v), False, value
    prim, k, u, v, value = argmax_qmaps(masked)
    return (prim, k, u, v), False, value


def epsilon_at(step: int, cfg: AgentConfig) -> float:
    if cfg.epsilon_decay_steps <= 0:
        return cfg.epsilon_final
    frac = min(1.0, step / cfg.epsilon_decay_steps)
    return cfg.epsilon_initial + (cfg.epsilon_final - cfg.epsilon_initial) * frac


def beta_at(step: int, cfg: AgentConfig) -> float:
    if cfg.replay_beta_steps <= 0:
        return cfg.replay_beta_final
    frac = min(1.0, step / cfg.replay_beta_steps)
    return cfg.replay_beta_initial + (cfg.replay_beta_final - cfg.replay_beta_initial) * frac


# ---------------------------------------------------------------------------
# Double DQN target


def td_target(reward: float, next_online: QMaps, next_target: QMaps,
              next_object_mask: np.ndarray, next_goal: np.ndarray | None,
              terminal: bool, gamma: float,
              push_dilate_radius: int = 4) -> float:
    """Double DQN: the online net picks the next action, the target net
    prices it."""
    if terminal:
        return float(reward)
    masked = masked_qmaps(next_online, next_object_mask, next_goal, push_dilate_radius)
    prim, k, u, v, _ = argmax_qmaps(masked)
    value_map = next_target.grasp if prim == "grasp" else next_target.push
    return float(reward) + gamma * float(value_map[k, u, v])


def sync_target(params: qfunc.NetworkParams) -> qfunc.NetworkParams:
    return params.copy()


# ---------------------------------------------------------------------------
# prioritized replay (proportional variant)


@dataclass
class Transition:
    height: np.ndarray          # (H, W) float32
    color: np.ndarray           # (H, W) uint8
    seg: np.ndarray             # (H, W) int16
    goal_id: int | None
    action: tuple[str, int, int, int]       # primitive, k, u, v
    reward: float
    next_height: np.ndarray
    next_color: np.ndarray
    next_seg: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring with priority-proportional sampling."""

    def __init__(self, capacity: int, alpha: float, priority_eps: float):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.alpha = alpha
        self.priority_eps = priority_eps
        self.items: list[Transition] = []
        self.priorities = np.zeros(capacity, dtype=np.float64)
        self._next = 0          # ring write position

    def __len__(self) -> int:
        return len(self.items)

    def insert(self, tr: Transition):
        prio = self.priorities[:len(self.items)].max() if self.items else 1.0
        if len(self.items) < self.capacity:
            self.items.append(tr)
            self.priorities[len(self.items) - 1] = prio
        else:
            self.items[self._next] = tr
            self.priorities[self._next] = prio
            self._next = (self._next + 1) % self.capacity

    def probabilities(self) -> np.ndarray:
        p = self.priorities[:len(self.items)] ** self.alpha
        return p / p.sum()

    def sample(self, batch: int, beta: float, rng: np.random.Generator):
        if len(self.items) < 1:
            raise AgentError("replay buffer is empty")
        n = len(self.items)
        probs = self.probabilities()
        idx = rng.choice(n, size=batch, replace=True, p=probs)
        weights = (n * probs[idx]) ** (-beta)
        w_max = (n * probs.min()) ** (-beta)
        weights = weights / w_max
        return [self.items[i] for i in idx], weights.astype(np.float64), idx

    def update(self, indices: np.ndarray, td_errors: np.ndarray):
        for i, err in zip(indices, td_errors):
            self.priorities[i] = abs(float(err)) + self.priority_eps


# ---------------------------------------------------------------------------
# one learning step


def learn_step(params: qfunc.NetworkParams, target_params: qfunc.NetworkParams,
               adam: qfunc.AdamState, buffer: ReplayBuffer,
               agent_cfg: AgentConfig, optim_cfg: OptimConfig,
               percept_cfg: PerceptConfig, rng: np.random.Generator,
               step: int):
    """Sample a prioritized batch, run Double DQN updates at the executed
    pixels, and Adam-step the touched parameter groups.

    Returns (params', adam', loss) and updates buffer priorities in place.
    """
    batch, weights, idx = buffer.sample(agent_cfg.batch_size, beta_at(step, agent_cfg), rng)
    h = batch[0].height.shape[0]
    radius = percept_cfg.push_dilate_radius
    n_rot = percept.N_ROTATIONS

    # TD targets: one batched online pass over every non-terminal next state
    # (all 16 rotations each), then one batched target-net pass at the
    # online argmax rotations only.
    targets = np.zeros(len(batch))
    non_term = [i for i, tr in enumerate(batch) if not tr.terminal]
    for i, tr in enumerate(batch):
        if tr.terminal:
            targets[i] = tr.reward
    if non_term:
        x_nexts = {}
        stacks = []
        for i in non_term:
            tr = batch[i]
            hmap = Heightmap(tr.next_height, tr.next_color, percept_cfg.resolution)
            x_next = percept.net_input(hmap)
            x_nexts[i] = x_next
            stacks.append(np.stack([percept.rotate_map(x_next, k)
                                    for k in range(n_rot)]))
        g_all, p_all, _ = qfunc.forward(params, np.concatenate(stacks))
        picks = []
        for pos, i in enumerate(non_term):
            tr = batch[i]
            sl = slice(pos * n_rot, (pos + 1) * n_rot)
            q_online = QMaps(
                grasp=np.stack([percept.inverse_rotate_map(g_all[sl][k], k)
                                for k in range(n_rot)]),
                push=np.stack([percept.inverse_rotate_map(p_all[sl][k], k)
                               for k in range(n_rot)]),
            )
            seg = SegMap(tr.next_seg)
            obj_mask = percept.object_mask(seg)
            goal = percept.goal_mask(seg, tr.goal_id) if tr.goal_id is not None else None
            masked = masked_qmaps(q_online, obj_mask, goal, radius)
            prim, k, u, v, _ = argmax_qmaps(masked)
            ur, vr, _ok = rotated_pixel(u, v, k, h, h)
            picks.append((i, prim, k, ur, vr))
        x_tgt = np.stack([percept.rotate_map(x_nexts[i], k)
                          for (i, _prim, k, _ur, _vr) in picks])
        gq_t, pq_t, _ = qfunc.forward(target_params, x_tgt)
        for pos, (i, prim, _k, ur, vr) in enumerate(picks):
            val = float((gq_t if prim == "grasp" else pq_t)[pos, ur, vr])
            targets[i] = batch[i].reward + agent_cfg.gamma * val

    # predicted Q at the executed pixels, one batched forward
    xs = np.empty((len(batch), 4, h, h), dtype=np.float32)
    pix = []
    for i, tr in enumerate(batch):
        hmap = Heightmap(tr.height, tr.color, percept_cfg.resolution)
        prim, k, u, v = tr.action
        xs[i] = percept.rotate_map(percept.net_input(hmap), k)
        ur, vr, ok = rotated_pixel(u, v, k, h, h)
        pix.append((prim, ur, vr, ok))
    gq, pq, trace = qfunc.forward(params, xs)

    dq_grasp = np.zeros((len(batch), h, h), dtype=np.float32)
    dq_push = np.zeros((len(batch), h, h), dtype=np.float32)
    td_errors = np.zeros(len(batch))
    total_loss = 0.0
    inv_b = 1.0 / len(batch)
    for i, (prim, ur, vr, ok) in enumerate(pix):
        if not ok:
            # the executed pixel left the rotated frame (corner + diagonal
            # rotation on an explored action); nothing to learn from
            continue
        q_pred = float((gq if prim == "grasp" else pq)[i, ur, vr])
        delta = q_pred - targets[i]
        loss, dloss = qfunc.huber(delta, optim_cfg.huber_kappa)
        td_errors[i] = delta
        total_loss += weights[i] * loss * inv_b
        seed = np.float32(weights[i] * dloss * inv_b)
        if prim == "grasp":
            dq_grasp[i, ur, vr] = seed
        else:
            dq_push[i, ur, vr] = seed

    grads = qfunc.backward_maps(params, trace,
                                dq_grasp if dq_grasp.any() else None,
                                dq_push if dq_push.any() else None)
    if any(grads.active):
        params, adam = qfunc.adam_step(params, grads, adam, optim_cfg)
    buffer.update(idx, td_errors)
    return params, adam, float(total_loss)


# ---------------------------------------------------------------------------
# transition log records


def log_record(step: int, stage: int, mode: str, goal_id, action: ActionSpec,
               explored: bool, epsilon: float, reward: float, loss,
               outcome_success: bool, grasped_id, moved_ids, scatter,
               eta_value, mr_before, mr_after, terminal: bool,
               scene_hash_after: str, q_value: float) -> str:
    rec = {
        "step": step, "stage": stage, "mode": mode, "goal_id": goal_id,
        "action": action.to_json(), "explored": explored,
        "epsilon": round(epsilon, 6), "reward": reward,
        "loss": loss, "success": outcome_success, "grasped_id": grasped_id,
        "moved_ids": sorted(moved_ids), "scatter": scatter,
        "eta": eta_value, "mr_before": mr_before, "mr_after": mr_after,
        "terminal": terminal, "scene_hash_after": scene_hash_after,
        "q_value": None if q_value != q_value else q_value,
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def parse_log(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
