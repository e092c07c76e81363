#!/usr/bin/env python3
"""Author the ten adversarial challenge scenes and verify their geometry.

Families:
  * rows      - the goal block sits tightly side-by-side inside a row of
                identical long blocks; every grasp rotation collides with
                either the goal's long sides or a neighbour.
  * enclosure - the goal is ringed by four plates with zero gaps, so the
                whole border band starts occupied (m_r = 1.0).

Each scene is written to src/pushgrasp/data/challenge/caseNN.scene after
checking: exactly one goal, no interpenetration, goal grasp infeasible at
its centroid for all 16 rotations, and (enclosures) full border occupancy.
"""

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from pushgrasp import bench, percept, world  # noqa: E402
from pushgrasp.config import PerceptConfig, Profile, WorldConfig  # noqa: E402

OUT = pathlib.Path(__file__).resolve().parents[1] / "src/pushgrasp/data/challenge"
GAP = 5e-5        # clearance between "touching" blocks, below overlap_tol
CX, CY = 0.224, 0.224


def rect(hx, hy):
    return np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])


def octagon(r):
    ang = np.arange(8) * (np.pi / 4) + np.pi / 8
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def rotate(vec, phi):
    c, s = np.cos(phi), np.sin(phi)
    return np.array([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1]])


def row_case(phi: float, n: int, centre=(CX, CY)) -> world.Scene:
    """Row of n long blocks (long axis across the row), goal in the middle."""
    hx, hy = 0.015, 0.0425
    pitch = 2 * hx + GAP
    along = rotate(np.array([1.0, 0.0]), phi)
    objs = []
    mid = n // 2
    for i in range(n):
        off = (i - mid) * pitch
        pos = np.array(centre) + off * along
        objs.append(world.ObjectSpec(
            id=i + 1, shape=rect(hx, hy),
            pose=(float(pos[0]), float(pos[1]), float(phi)),
            color_tag=(4 if i == mid else (i % 3) + 1),
            is_goal_candidate=(i == mid)))
    return world.Scene(objs, (0.448, 0.448))


def wall_case(phi: float = 0.0, centre=(CX, CY)) -> world.Scene:
    """Two packed rows of long blocks (a 2x3 wall), goal at front middle."""
    hx, hy = 0.015, 0.0425
    pitch_x = 2 * hx + GAP
    pitch_y = 2 * hy + GAP
    along = rotate(np.array([1.0, 0.0]), phi)
    across = rotate(np.array([0.0, 1.0]), phi)
    objs = []
    oid = 1
    for row in (0, 1):
        for i in (-1, 0, 1):
            pos = np.array(centre) + i * pitch_x * along + row * pitch_y * across
            is_goal = (row == 0 and i == 0)
            objs.append(world.ObjectSpec(
                id=oid, shape=rect(hx, hy),
                pose=(float(pos[0]), float(pos[1]), float(phi)),
                color_tag=4 if is_goal else (oid % 3) + 1,
                is_goal_candidate=is_goal))
            oid += 1
    return world.Scene(objs, (0.448, 0.448))


def ring_case(phi: float = 0.0, g: float = 0.018,
              centre=(CX, CY)) -> world.Scene:
    """Goal sealed inside four plates; the border band starts fully covered."""
    cx, cy = centre
    shape = rect(g, g)
    plate_h = rect(g + 0.037, 0.015)   # top / bottom, long axis across
    plate_v = rect(0.014, g)           # left / right fillers
    dy = g + 0.015 + GAP
    dx = g + 0.014 + GAP
    objs = [world.ObjectSpec(1, shape, (cx, cy, phi), 4, True)]
    placements = [
        (plate_h, (0.0, dy)), (plate_h, (0.0, -dy)),
        (plate_v, (dx, 0.0)), (plate_v, (-dx, 0.0)),
    ]
    for i, (shp, off) in enumerate(placements):
        o = rotate(np.array(off), phi)
        objs.append(world.ObjectSpec(i + 2, shp,
                                     (cx + float(o[0]), cy + float(o[1]), phi),
                                     (i % 3) + 1, False))
    return world.Scene(objs, (0.448, 0.448))


def verify(scene: world.Scene, case_id: int, expect_ring: bool):
    prof = Profile()
    wcfg, pcfg = prof.world, prof.percept
    goals = [o for o in scene.objects if o.is_goal_candidate]
    assert len(goals) == 1, f"case {case_id}: need exactly one goal"
    goal_id = goals[0].id
    for a in scene.objects:
        for b in scene.objects:
            if a.id < b.id:
                pen = world.penetration_depth(a.world_vertices(), b.world_vertices())
                assert pen <= wcfg.overlap_tol, \
                    f"case {case_id}: objects {a.id},{b.id} interpenetrate {pen}"
    assert bench.goal_grasp_infeasible(scene, goal_id, prof), \
        f"case {case_id}: goal is graspable without any push"
    hmap, seg = percept.render(scene, pcfg.resolution)
    goal = percept.goal_mask(seg, goal_id)
    border = percept.border_mask(goal, pcfg.border_radius)
    stats = percept.border_occupancy(border, hmap, pcfg.height_thresh)
    if expect_ring:
        assert stats.m_r == 1.0, f"case {case_id}: ring m_r = {stats.m_r}"
    else:
        assert stats.m_r < 1.0, f"case {case_id}: row m_r = {stats.m_r}"
    return stats.m_r


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    cases = {
        1: (row_case(0.0, 3), False),
        2: (row_case(np.pi / 4, 3), False),
        3: (row_case(np.pi / 2, 3), False),
        4: (row_case(0.0, 5), False),
        5: (wall_case(0.0, centre=(0.224, 0.20)), False),
        6: (ring_case(0.0), True),
        7: (ring_case(np.pi / 6), True),
        8: (ring_case(np.pi / 12, g=0.021), True),
        9: (ring_case(np.pi / 2, centre=(0.20, 0.24)), True),
        10: (row_case(3 * np.pi / 8, 5, centre=(0.24, 0.21)), False),
    }
    for cid, (scene, expect_ring) in sorted(cases.items()):
        m_r = verify(scene, cid, expect_ring)
        path = OUT / f"case{cid:02d}.scene"
        path.write_text(world.scene_to_text(scene), encoding="utf-8")
        kind = "ring" if expect_ring else "row"
        print(f"case {cid:2d} [{kind}]  m_r={m_r:.3f}  -> {path.name}")
    print("all cases verified")


if __name__ == "__main__":
    main()
