"""Scene rendering and map operations.

Maps are numpy arrays indexed [row, col] with row <-> world y and
col <-> world x; a pixel holds the object whose interior contains the
pixel centre (no anti-aliasing).  Rotations use nearest-neighbour
sampling about the grid centre so binary masks stay binary; multiples
of 90 degrees land on exact index permutations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import Scene, points_in_poly

N_ROTATIONS = 16

# tag 0 is the empty table; object colour tags start at 1
PALETTE = np.array([
    [0, 0, 0],
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [188, 189, 34],
    [23, 190, 207],
], dtype=np.uint8)


class PerceptError(Exception):
    pass


class MissingGoalError(PerceptError):
    """The goal id does not appear in the segmentation map."""


class EmptyMaskError(PerceptError):
    pass


@dataclass
class Heightmap:
    height: np.ndarray        # (H, W) float32, metres above the table
    color: np.ndarray         # (H, W) uint8 colour tags
    resolution: float         # metres per pixel
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def grid(self) -> int:
        return self.height.shape[0]


@dataclass
class SegMap:
    ids: np.ndarray           # (H, W) int16, 0 = empty


@dataclass
class BorderStats:
    m: int                    # pixels in the border band
    m_v: int                  # of those, pixels above the workspace
    m_r: float                # occupancy ratio m_v / m


def render(scene: Scene, resolution: float) -> tuple[Heightmap, SegMap]:
    """Orthographic top-down projection onto a square pixel grid."""
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    w, h = scene.workspace
    cols = int(round(w / resolution))
    rows = int(round(h / resolution))
    height = np.zeros((rows, cols), dtype=np.float32)
    color = np.zeros((rows, cols), dtype=np.uint8)
    ids = np.zeros((rows, cols), dtype=np.int16)

    xs = (np.arange(cols) + 0.5) * resolution
    ys = (np.arange(rows) + 0.5) * resolution
    for obj in scene.objects:
        verts = obj.world_vertices()
        xmin, ymin = verts.min(axis=0)
        xmax, ymax = verts.max(axis=0)
        c0 = max(0, int(np.floor(xmin / resolution)) - 1)
        c1 = min(cols, int(np.ceil(xmax / resolution)) + 1)
        r0 = max(0, int(np.floor(ymin / resolution)) - 1)
        r1 = min(rows, int(np.ceil(ymax / resolution)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        px, py = np.meshgrid(xs[c0:c1], ys[r0:r1])
        inside = points_in_poly(px, py, verts)
        sub = (slice(r0, r1), slice(c0, c1))
        height[sub][inside] = scene.object_height
        color[sub][inside] = obj.color_tag
        ids[sub][inside] = obj.id
    return Heightmap(height, color, resolution), SegMap(ids)


def object_mask(seg: SegMap) -> np.ndarray:
    return seg.ids != 0


def goal_mask(seg: SegMap, goal_id: int) -> np.ndarray:
    mask = seg.ids == goal_id
    if not mask.any():
        raise MissingGoalError(f"goal id {goal_id} not visible in segmentation")
    return mask


_DISC_OFFSETS: dict[int, list[tuple[int, int]]] = {}


def _disc_offsets(radius: int) -> list[tuple[int, int]]:
    offs = _DISC_OFFSETS.get(radius)
    if offs is None:
        offs = [(di, dj)
                for di in range(-radius, radius + 1)
                for dj in range(-radius, radius + 1)
                if di * di + dj * dj <= radius * radius]
        _DISC_OFFSETS[radius] = offs
    return offs


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a Euclidean disc structuring element."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    out = mask.copy()
    h, w = mask.shape
    for di, dj in _disc_offsets(radius):
        if di == 0 and dj == 0:
            continue
        src_r = slice(max(0, -di), min(h, h - di))
        dst_r = slice(max(0, di), min(h, h + di))
        src_c = slice(max(0, -dj), min(w, w - dj))
        dst_c = slice(max(0, dj), min(w, w + dj))
        out[dst_r, dst_c] |= mask[src_r, src_c]
    return out


def border_mask(goal: np.ndarray, radius: int) -> np.ndarray:
    """Band around the goal: its dilation minus the goal itself."""
    if not goal.any():
        raise EmptyMaskError("goal mask is empty")
    return dilate(goal, radius) & ~goal


def border_occupancy(border: np.ndarray, height: Heightmap | np.ndarray,
                     h_thresh: float) -> BorderStats:
    if not border.any():
        raise EmptyMaskError("border mask is empty")
    hmap = height.height if isinstance(height, Heightmap) else height
    m = int(border.sum())
    m_v = int((hmap[border] > h_thresh).sum())
    return BorderStats(m=m, m_v=m_v, m_r=m_v / m)


def eta(before: BorderStats, after: BorderStats) -> float:
    """Change in free space around the goal; positive = space was freed."""
    return before.m_r - after.m_r


# ---------------------------------------------------------------------------
# rotations

_ROT_CACHE: dict[tuple[int, int, int, int], tuple] = {}


def _rotation_index_map(h: int, w: int, k: int, sign: int):
    """Source indices implementing a content rotation by sign*k*pi/8."""
    key = (h, w, k % N_ROTATIONS, sign)
    cached = _ROT_CACHE.get(key)
    if cached is not None:
        return cached
    ang = sign * (k % N_ROTATIONS) * np.pi / 8.0
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xo = jj - cj
    yo = ii - ci
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    xs = xo * cos_a - yo * sin_a + cj
    ys = xo * sin_a + yo * cos_a + ci
    src_j = np.rint(xs).astype(np.int64)
    src_i = np.rint(ys).astype(np.int64)
    valid = (src_i >= 0) & (src_i < h) & (src_j >= 0) & (src_j < w)
    src_i = np.clip(src_i, 0, h - 1)
    src_j = np.clip(src_j, 0, w - 1)
    result = (src_i, src_j, valid)
    _ROT_CACHE[key] = result
    return result


def _apply_rotation(grid: np.ndarray, k: int, sign: int) -> np.ndarray:
    if grid.shape[-2] != grid.shape[-1]:
        raise ValueError("rotation requires a square grid")
    if k % N_ROTATIONS == 0:
        return grid.copy()
    src_i, src_j, valid = _rotation_index_map(grid.shape[-2], grid.shape[-1], k, sign)
    out = grid[..., src_i, src_j]
    out[..., ~valid] = 0
    return out


def rotate_map(grid: np.ndarray, k: int) -> np.ndarray:
    """Rotate map content by k*pi/8 into the gripper-aligned frame.

    A world feature at bearing k*pi/8 appears axis-aligned in the output,
    which is what lets one shared network score all 16 gripper angles.
    """
    return _apply_rotation(grid, k, sign=1)


def inverse_rotate_map(grid: np.ndarray, k: int) -> np.ndarray:
    return _apply_rotation(grid, k, sign=-1)


# ---------------------------------------------------------------------------
# network input and pixel/world transforms


def net_input(hmap: Heightmap, depth_scale: float = 0.1) -> np.ndarray:
    """(4, H, W) float32: palette RGB in [0, 1] plus scaled depth."""
    rgb = PALETTE[hmap.color].astype(np.float32) / 255.0
    depth = hmap.height.astype(np.float32) / np.float32(depth_scale)
    return np.concatenate([rgb.transpose(2, 0, 1), depth[None]], axis=0)


def pixel_to_world(u: int, v: int, resolution: float,
                   origin=(0.0, 0.0)) -> tuple[float, float]:
    return (origin[0] + (v + 0.5) * resolution,
            origin[1] + (u + 0.5) * resolution)


def world_to_pixel(x: float, y: float, resolution: float, grid: int,
                   origin=(0.0, 0.0)) -> tuple[int, int]:
    v = int(np.clip((x - origin[0]) / resolution, 0, grid - 1))
    u = int(np.clip((y - origin[1]) / resolution, 0, grid - 1))
    return u, v


# ---------------------------------------------------------------------------
# portable graymap export


def write_pgm(grid: np.ndarray, path: str, scale: float | None = None) -> float:
    """Write a P5 image; values are mapped so ``scale`` -> 255.

    Returns the scale actually used (max value when not given).  A
    sidecar ``<path>.scale`` records it for later inspection.
    """
    arr = np.asarray(grid, dtype=np.float64)
    arr = np.where(np.isfinite(arr), arr, 0.0)
    arr = np.maximum(arr, 0.0)
    if scale is None:
        scale = float(arr.max())
    denom = scale if scale > 0 else 1.0
    img = np.clip(arr / denom * 255.0, 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())
    with open(str(path) + ".scale", "w", encoding="utf-8") as fh:
        fh.write(f"value_at_255 = {scale!r}\n")
    return scale


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise PerceptError("not a P5 graymap")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        if maxval != 255:
            raise PerceptError("expected 8-bit graymap")
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)
