"""Deterministic 2D tabletop: convex blocks, disc-pusher sweeps, antipodal grasps.

All physics is quasi-static and translation-only: a push sweeps a small
disc through the scene in substeps, displacing intersected objects along
the push direction and propagating contact through object chains.  A
grasp is a binary clearance test.  Everything is a pure function of its
inputs, so replaying a logged action sequence reproduces scenes exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .config import WorldConfig


class WorldError(Exception):
    pass


class PlacementError(WorldError):
    """Rejection sampling could not fit the requested objects."""


class IdMismatchError(WorldError):
    pass


class SceneFormatError(WorldError):
    pass


# ---------------------------------------------------------------------------
# convex geometry


def poly_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _edge_normals(verts: np.ndarray) -> np.ndarray:
    """Outward unit normals of a CCW convex polygon."""
    edges = np.roll(verts, -1, axis=0) - verts
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / lengths


def point_in_poly(point, verts: np.ndarray) -> bool:
    """Inclusive point-in-convex-polygon test (CCW vertices)."""
    p = np.asarray(point, dtype=float)
    nxt = np.roll(verts, -1, axis=0)
    cross = (nxt[:, 0] - verts[:, 0]) * (p[1] - verts[:, 1]) \
        - (nxt[:, 1] - verts[:, 1]) * (p[0] - verts[:, 0])
    return bool(np.all(cross >= -1e-12))


def points_in_poly(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    nxt = np.roll(verts, -1, axis=0)
    inside = np.ones(px.shape, dtype=bool)
    for (x0, y0), (x1, y1) in zip(verts, nxt):
        inside &= (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0) >= -1e-12
    return inside


def point_poly_distance(point, verts: np.ndarray) -> float:
    """Euclidean distance from a point to a convex polygon (0 if inside)."""
    p = np.asarray(point, dtype=float)
    if point_in_poly(p, verts):
        return 0.0
    nxt = np.roll(verts, -1, axis=0)
    d = nxt - verts
    t = np.einsum("ij,ij->i", p - verts, d) / np.einsum("ij,ij->i", d, d)
    t = np.clip(t, 0.0, 1.0)
    closest = verts + t[:, None] * d
    return float(np.min(np.linalg.norm(closest - p, axis=1)))


def _proj_interval(verts: np.ndarray, axis: np.ndarray):
    p = verts @ axis
    return p.min(), p.max()


def penetration_depth(a: np.ndarray, b: np.ndarray) -> float:
    """SAT penetration depth of two convex polygons (0 when separated)."""
    depth = np.inf
    for axes_src in (a, b):
        for n in _edge_normals(axes_src):
            amin, amax = _proj_interval(a, n)
            bmin, bmax = _proj_interval(b, n)
            overlap = min(amax, bmax) - max(amin, bmin)
            if overlap <= 0:
                return 0.0
            depth = min(depth, overlap)
    return float(depth)


def mtv(a: np.ndarray, b: np.ndarray):
    """Minimum translation vector pushing b out of a; None when separated."""
    best_depth = np.inf
    best_axis = None
    for axes_src in (a, b):
        for n in _edge_normals(axes_src):
            amin, amax = _proj_interval(a, n)
            bmin, bmax = _proj_interval(b, n)
            overlap = min(amax, bmax) - max(amin, bmin)
            if overlap <= 0:
                return None
            if overlap < best_depth:
                best_depth = overlap
                # orient so that moving b along the axis separates the pair
                ca, cb = a.mean(axis=0), b.mean(axis=0)
                best_axis = n if (cb - ca) @ n >= 0 else -n
    return best_axis * best_depth


def directional_separation(mover: np.ndarray, fixed: np.ndarray, d: np.ndarray) -> float:
    """Smallest t >= 0 such that mover + t*d no longer penetrates fixed."""
    if penetration_depth(mover, fixed) <= 0:
        return 0.0
    best = np.inf
    for axes_src in (mover, fixed):
        for n in _edge_normals(axes_src):
            nd = float(n @ d)
            fmin, fmax = _proj_interval(fixed, n)
            mmin, mmax = _proj_interval(mover, n)
            if nd > 1e-12:
                t = (fmax - mmin) / nd      # mover exits on the +n side
                if t >= 0:
                    best = min(best, t)
            elif nd < -1e-12:
                t = (fmin - mmax) / nd      # mover exits on the -n side
                if t >= 0:
                    best = min(best, t)
    return float(best) if np.isfinite(best) else 0.0


def disc_separation(center, radius: float, verts: np.ndarray, d: np.ndarray) -> float:
    """Smallest t >= 0 moving the polygon along d clear of a disc.

    dist(poly + t*d, c) is convex in t, so the clearance boundary on the
    t >= 0 side is a single crossing found by bisection.
    """
    def gap(t: float) -> float:
        return point_poly_distance(center, verts + t * d) - radius

    if gap(0.0) >= 0.0:
        return 0.0
    hi = 2.0 * radius + 1e-3
    for _ in range(60):
        if gap(hi) >= 1e-9:
            break
        hi *= 2.0
    else:
        raise WorldError("disc separation failed to bracket")
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 1e-9:
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# scene model


@dataclass
class ObjectSpec:
    id: int
    shape: np.ndarray            # (n, 2) CCW convex polygon, object frame, metres
    pose: tuple[float, float, float]  # x, y, theta
    color_tag: int = 1
    is_goal_candidate: bool = False

    def world_vertices(self) -> np.ndarray:
        x, y, th = self.pose
        c, s = np.cos(th), np.sin(th)
        rot = np.array([[c, -s], [s, c]])
        return self.shape @ rot.T + np.array([x, y])

    def translated(self, delta) -> "ObjectSpec":
        x, y, th = self.pose
        return replace(self, pose=(x + float(delta[0]), y + float(delta[1]), th))

    def copy(self) -> "ObjectSpec":
        return replace(self, shape=self.shape.copy())


@dataclass
class Scene:
    objects: list[ObjectSpec]
    workspace: tuple[float, float]     # (width, height), origin at (0, 0)
    object_height: float = 0.03

    def copy(self) -> "Scene":
        return Scene([o.copy() for o in self.objects], self.workspace, self.object_height)

    def get(self, oid: int) -> ObjectSpec:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def ids(self) -> set[int]:
        return {o.id for o in self.objects}


@dataclass
class StepOutcome:
    primitive: str                     # "push" | "grasp"
    success: bool
    grasped_id: int | None
    moved_ids: set[int]
    scene_after: Scene


def _clamp_to_workspace(obj: ObjectSpec, workspace) -> ObjectSpec:
    verts = obj.world_vertices()
    w, h = workspace
    dx = dy = 0.0
    xmin, ymin = verts.min(axis=0)
    xmax, ymax = verts.max(axis=0)
    if xmin < 0:
        dx = -xmin
    elif xmax > w:
        dx = w - xmax
    if ymin < 0:
        dy = -ymin
    elif ymax > h:
        dy = h - ymax
    if dx or dy:
        return obj.translated((dx, dy))
    return obj


def _relax_overlaps(objs: list[ObjectSpec], workspace, tol: float, max_iters: int = 60):
    """Minimum-translation relaxation until all penetrations are within tol."""
    for _ in range(max_iters):
        worst = 0.0
        for i in range(len(objs)):
            vi = objs[i].world_vertices()
            for j in range(i + 1, len(objs)):
                vj = objs[j].world_vertices()
                vec = mtv(vi, vj)
                if vec is None:
                    continue
                depth = float(np.linalg.norm(vec))
                if depth <= tol:
                    continue
                worst = max(worst, depth)
                shift = vec * (0.5 + 1e-3)
                objs[j] = _clamp_to_workspace(objs[j].translated(shift), workspace)
                objs[i] = _clamp_to_workspace(objs[i].translated(-shift), workspace)
                vi = objs[i].world_vertices()
        if worst == 0.0:
            return
    # leftover overlap within a crowded corner; keep the best effort


# ---------------------------------------------------------------------------
# object catalogue used by the random spawner

_PALETTE_SIZE = 9


def _make_shape(kind: int, rng: np.random.Generator) -> np.ndarray:
    if kind == 0:      # square
        e = rng.uniform(0.030, 0.044) / 2
        return np.array([[-e, -e], [e, -e], [e, e], [-e, e]])
    if kind == 1:      # elongated rectangle
        sx = rng.uniform(0.056, 0.086) / 2
        sy = rng.uniform(0.026, 0.034) / 2
        return np.array([[-sx, -sy], [sx, -sy], [sx, sy], [-sx, sy]])
    if kind == 2:      # triangle
        s = rng.uniform(0.040, 0.056)
        r = s / np.sqrt(3.0)
        ang = np.array([np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3])
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    # octagon standing in for a disc
    r = rng.uniform(0.016, 0.023)
    ang = np.arange(8) * (2 * np.pi / 8) + np.pi / 8
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def spawn_random(n_goal_candidates: int, n_obstacles: int, seed,
                 cfg: WorldConfig | None = None,
                 cluster_radius: float = 0.0,
                 cluster_center: tuple[float, float] | None = None) -> Scene:
    """Drop objects at uniformly random poses, rejecting overlaps.

    ``seed`` may be an integer or a Generator.  ``cluster_radius`` > 0
    restricts placement to a disc (default centre: workspace centre),
    which is how cluttered training scenes are produced at desk scale.
    """
    cfg = cfg or WorldConfig()
    if n_goal_candidates < 0 or n_obstacles < 0:
        raise ValueError("object counts must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = n_goal_candidates + n_obstacles
    w, h = cfg.workspace_w, cfg.workspace_h
    cx, cy = cluster_center if cluster_center is not None else (w / 2, h / 2)
    objs: list[ObjectSpec] = []
    for idx in range(total):
        placed = None
        for _ in range(cfg.spawn_max_attempts):
            kind = int(rng.integers(0, 4))
            shape = _make_shape(kind, rng)
            margin = float(np.max(np.linalg.norm(shape, axis=1))) + 1e-3
            if 2 * margin >= w or 2 * margin >= h:
                continue        # shape cannot fit this workspace at all
            if cluster_radius > 0:
                r = cluster_radius * np.sqrt(rng.uniform())
                a = rng.uniform(0, 2 * np.pi)
                x = np.clip(cx + r * np.cos(a), margin, w - margin)
                y = np.clip(cy + r * np.sin(a), margin, h - margin)
            else:
                x = rng.uniform(margin, w - margin)
                y = rng.uniform(margin, h - margin)
            th = rng.uniform(0, 2 * np.pi)
            cand = ObjectSpec(
                id=idx + 1,
                shape=shape,
                pose=(float(x), float(y), float(th)),
                color_tag=idx % _PALETTE_SIZE + 1,
                is_goal_candidate=idx < n_goal_candidates,
            )
            cv = cand.world_vertices()
            if all(penetration_depth(cv, o.world_vertices()) <= cfg.overlap_tol
                   for o in objs):
                placed = cand
                break
        if placed is None:
            raise PlacementError(
                f"could not place object {idx + 1} of {total} "
                f"after {cfg.spawn_max_attempts} attempts")
        objs.append(placed)
    return Scene(objs, (w, h), cfg.object_height)


# ---------------------------------------------------------------------------
# primitives


def apply_push(scene: Scene, start, theta: float, length: float | None = None,
               cfg: WorldConfig | None = None) -> StepOutcome:
    """Sweep a pusher disc from ``start`` along ``theta``."""
    cfg = cfg or WorldConfig()
    length = cfg.push_length if length is None else length
    d = np.array([np.cos(theta), np.sin(theta)])
    start = np.asarray(start, dtype=float)
    objs = [o.copy() for o in scene.objects]
    before = {o.id: np.array(o.pose[:2]) for o in objs}

    for step in range(1, cfg.push_substeps + 1):
        c = start + d * (length * step / cfg.push_substeps)
        for i, obj in enumerate(objs):
            t = disc_separation(c, cfg.push_radius, obj.world_vertices(), d)
            if t > 0:
                objs[i] = _clamp_to_workspace(obj.translated(t * d), scene.workspace)
        # propagate contact through chains, front object moves first
        for _ in range(cfg.push_iters):
            any_moved = False
            for i in range(len(objs)):
                vi = objs[i].world_vertices()
                for j in range(i + 1, len(objs)):
                    vj = objs[j].world_vertices()
                    if penetration_depth(vi, vj) <= cfg.overlap_tol:
                        continue
                    ti = directional_separation(vi, vj, d)
                    tj = directional_separation(vj, vi, d)
                    eps = 1e-9
                    if tj <= ti:
                        objs[j] = _clamp_to_workspace(
                            objs[j].translated((tj + eps) * d), scene.workspace)
                    else:
                        objs[i] = _clamp_to_workspace(
                            objs[i].translated((ti + eps) * d), scene.workspace)
                        vi = objs[i].world_vertices()
                    any_moved = True
            if not any_moved:
                break

    _relax_overlaps(objs, scene.workspace, cfg.overlap_tol)

    moved = {o.id for o in objs
             if np.linalg.norm(np.array(o.pose[:2]) - before[o.id]) > cfg.move_tol}
    after = Scene(objs, scene.workspace, scene.object_height)
    return StepOutcome("push", bool(moved), None, moved, after)


def finger_footprints(point, theta: float, cfg: WorldConfig) -> list[np.ndarray]:
    """World-frame rectangles of the two finger tips for a grasp pose."""
    point = np.asarray(point, dtype=float)
    axis = np.array([np.cos(theta), np.sin(theta)])       # gripper axis
    close = np.array([-np.sin(theta), np.cos(theta)])     # closing direction
    half_l = cfg.finger_len / 2
    half_w = cfg.finger_wid / 2
    rects = []
    for side in (1.0, -1.0):
        centre = point + side * cfg.gripper_half_width * close
        rects.append(np.array([
            centre - half_l * axis - half_w * close,
            centre + half_l * axis - half_w * close,
            centre + half_l * axis + half_w * close,
            centre - half_l * axis + half_w * close,
        ]))
    return rects


def apply_grasp(scene: Scene, point, theta: float,
                cfg: WorldConfig | None = None) -> StepOutcome:
    """Top-down antipodal grasp: needs the point on an object and both
    finger footprints clear of every object."""
    cfg = cfg or WorldConfig()
    point = np.asarray(point, dtype=float)

    target = None
    for obj in scene.objects:
        if point_in_poly(point, obj.world_vertices()):
            target = obj
            break
    if target is None:
        return StepOutcome("grasp", False, None, set(), scene.copy())

    for rect in finger_footprints(point, theta, cfg):
        for obj in scene.objects:
            if penetration_depth(rect, obj.world_vertices()) > cfg.overlap_tol:
                return StepOutcome("grasp", False, None, set(), scene.copy())

    remaining = [o.copy() for o in scene.objects if o.id != target.id]
    after = Scene(remaining, scene.workspace, scene.object_height)
    return StepOutcome("grasp", True, target.id, set(), after)


def scatter_metric(before: Scene, after: Scene, cfg: WorldConfig | None = None) -> float:
    """Summed displacement of objects that moved between two scenes."""
    cfg = cfg or WorldConfig()
    if before.ids() != after.ids():
        raise IdMismatchError("scenes do not contain the same object ids")
    total = 0.0
    pos_after = {o.id: np.array(o.pose[:2]) for o in after.objects}
    for o in before.objects:
        d = float(np.linalg.norm(pos_after[o.id] - np.array(o.pose[:2])))
        if d > cfg.move_tol:
            total += d
    return total


# ---------------------------------------------------------------------------
# text serialization

_SCENE_HEADER = "# pushgrasp scene v1"


def scene_to_text(scene: Scene) -> str:
    lines = [_SCENE_HEADER]
    lines.append(f"workspace {scene.workspace[0]!r} {scene.workspace[1]!r}")
    lines.append(f"object_height {scene.object_height!r}")
    for o in scene.objects:
        verts = ";".join(f"{float(v[0])!r},{float(v[1])!r}" for v in o.shape)
        pose = ",".join(repr(float(p)) for p in o.pose)
        lines.append(
            f"obj {o.id} goal={int(o.is_goal_candidate)} color={o.color_tag} "
            f"pose={pose} verts={verts}")
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> Scene:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _SCENE_HEADER:
        raise SceneFormatError("missing scene header")
    workspace = None
    height = 0.03
    objects = []
    for ln in lines[1:]:
        parts = ln.split()
        try:
            if parts[0] == "workspace":
                workspace = (float(parts[1]), float(parts[2]))
            elif parts[0] == "object_height":
                height = float(parts[1])
            elif parts[0] == "obj":
                oid = int(parts[1])
                fields = dict(p.split("=", 1) for p in parts[2:])
                pose = tuple(float(v) for v in fields["pose"].split(","))
                verts = np.array([[float(c) for c in v.split(",")]
                                  for v in fields["verts"].split(";")])
                objects.append(ObjectSpec(
                    id=oid,
                    shape=verts,
                    pose=pose,  # type: ignore[arg-type]
                    color_tag=int(fields.get("color", 1)),
                    is_goal_candidate=bool(int(fields.get("goal", 0))),
                ))
            else:
                raise SceneFormatError(f"unknown record {parts[0]!r}")
        except (IndexError, KeyError, ValueError) as exc:
            raise SceneFormatError(f"bad scene line: {ln!r}") from exc
    if workspace is None:
        raise SceneFormatError("missing workspace record")
    ids = [o.id for o in objects]
    if len(ids) != len(set(ids)):
        raise SceneFormatError("duplicate object ids")
    return Scene(objects, workspace, height)


def scene_hash(scene: Scene) -> str:
    return hashlib.sha256(scene_to_text(scene).encode()).hexdigest()[:16]
