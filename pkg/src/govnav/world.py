"""Simulated 2-D environment: map, lidar, occupancy grid, planner.

The ground-truth world is a rectangle workspace with axis-aligned
rectangular obstacles. An ideal lidar raycasts against it; scans are fused
into a ternary occupancy grid (free / occupied / unknown, occupied is
sticky). Distance queries and planning treat unknown space as an
obstacle: in an unexplored environment that convention is what keeps the
distance-to-obstacles term a valid lower bound for the safety layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path as FilePath
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import PlanningFailed, PoseInObstacle
from .governor import Path
from .numkit import SymMatrix

__all__ = [
    "FREE",
    "OCCUPIED",
    "UNKNOWN",
    "GroundTruthMap",
    "LidarSpec",
    "OccupancyGrid",
    "raycast",
    "update_grid",
    "dist_to_obstacles",
    "astar_grid",
    "plan_path",
]

FREE = np.uint8(0)
OCCUPIED = np.uint8(1)
UNKNOWN = np.uint8(2)


@dataclass(frozen=True)
class GroundTruthMap:
    """Workspace bounds and axis-aligned rectangular obstacles (meters)."""

    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    obstacles: tuple[tuple[float, float, float, float], ...]

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmin < xmax and ymin < ymax):
            raise ValueError("workspace bounds are empty")
        for rect in self.obstacles:
            x0, y0, x1, y1 = rect
            if not (x0 < x1 and y0 < y1):
                raise ValueError(f"degenerate obstacle rectangle {rect}")
            if x0 < xmin or y0 < ymin or x1 > xmax or y1 > ymax:
                raise ValueError(f"obstacle {rect} leaves the workspace")

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthMap":
        bounds = tuple(float(v) for v in data["bounds_m"])
        obstacles = tuple(tuple(float(v) for v in r) for r in data.get("obstacles_m", []))
        return cls(bounds, obstacles)

    @classmethod
    def load(cls, path) -> "GroundTruthMap":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def in_workspace(self, q) -> bool:
        x, y = q[0], q[1]
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def contains_obstacle(self, q) -> bool:
        """True if q is inside an obstacle or outside the workspace."""
        if not self.in_workspace(q):
            return True
        x, y = q[0], q[1]
        return any(x0 <= x <= x1 and y0 <= y <= y1 for x0, y0, x1, y1 in self.obstacles)


@dataclass(frozen=True)
class LidarSpec:
    """Ideal (noise-free) 2-D scanner."""

    num_beams: int = 360
    max_range_m: float = 30.0
    angular_span_rad: float = 2.0 * math.pi

    def __post_init__(self):
        if self.num_beams < 1:
            raise ValueError("need at least one beam")
        if self.max_range_m <= 0:
            raise ValueError("max range must be positive")

    def beam_angles(self, heading: float) -> np.ndarray:
        """Beam directions; a full sweep starts at the heading, a partial
        sweep is centered on it."""
        if self.angular_span_rad >= 2.0 * math.pi - 1e-12:
            offsets = np.arange(self.num_beams) * (2.0 * math.pi / self.num_beams)
        elif self.num_beams == 1:
            offsets = np.zeros(1)
        else:
            offsets = np.linspace(-0.5 * self.angular_span_rad,
                                  0.5 * self.angular_span_rad, self.num_beams)
        return heading + offsets


def _slab_entry(origin, dirs, rect):
    """Per-beam entry distance into an axis-aligned rect (inf if missed)."""
    x0, y0, x1, y1 = rect
    dx = np.where(np.abs(dirs[:, 0]) < 1e-300, 1e-300, dirs[:, 0])
    dy = np.where(np.abs(dirs[:, 1]) < 1e-300, 1e-300, dirs[:, 1])
    tx1 = (x0 - origin[0]) / dx
    tx2 = (x1 - origin[0]) / dx
    ty1 = (y0 - origin[1]) / dy
    ty2 = (y1 - origin[1]) / dy
    t_enter = np.maximum(np.minimum(tx1, tx2), np.minimum(ty1, ty2))
    t_exit = np.minimum(np.maximum(tx1, tx2), np.maximum(ty1, ty2))
    hit = (t_enter <= t_exit) & (t_exit >= 0.0)
    return np.where(hit, np.maximum(t_enter, 0.0), np.inf)


def raycast(gt_map: GroundTruthMap, pose, spec: LidarSpec) -> np.ndarray:
    """Scan from pose = (x, y, heading). Returns an array of (angle, range)
    rows; ranges hit obstacles or the workspace boundary, capped at the
    sensor range. Raises PoseInObstacle if the sensor sits inside an
    obstacle (or outside the workspace)."""
    origin = np.asarray(pose[:2], dtype=float)
    if gt_map.contains_obstacle(origin):
        raise PoseInObstacle(f"sensor pose {origin.tolist()} is not in free space")
    angles = spec.beam_angles(float(pose[2]))
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    # exit distance through the workspace boundary counts as a hit
    xmin, ymin, xmax, ymax = gt_map.bounds
    dx = np.where(np.abs(dirs[:, 0]) < 1e-300, 1e-300, dirs[:, 0])
    dy = np.where(np.abs(dirs[:, 1]) < 1e-300, 1e-300, dirs[:, 1])
    tx = np.maximum((xmin - origin[0]) / dx, (xmax - origin[0]) / dx)
    ty = np.maximum((ymin - origin[1]) / dy, (ymax - origin[1]) / dy)
    ranges = np.minimum(tx, ty)
    for rect in gt_map.obstacles:
        ranges = np.minimum(ranges, _slab_entry(origin, dirs, rect))
    ranges = np.minimum(ranges, spec.max_range_m)
    return np.stack([angles, ranges], axis=1)


@dataclass
class OccupancyGrid:
    """Ternary occupancy over the workspace; cells[ix, iy], x-major."""

    resolution: float
    origin: np.ndarray  # world position of the corner of cell (0, 0)
    cells: np.ndarray

    @classmethod
    def unknown_for(cls, gt_map: GroundTruthMap, resolution: float) -> "OccupancyGrid":
        xmin, ymin, xmax, ymax = gt_map.bounds
        nx = int(math.ceil((xmax - xmin) / resolution))
        ny = int(math.ceil((ymax - ymin) / resolution))
        cells = np.full((nx, ny), UNKNOWN, dtype=np.uint8)
        return cls(resolution, np.array([xmin, ymin]), cells)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def world_to_cell(self, q) -> tuple[int, int]:
        ix = int(math.floor((q[0] - self.origin[0]) / self.resolution))
        iy = int(math.floor((q[1] - self.origin[1]) / self.resolution))
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return self.origin + self.resolution * (np.array([ix, iy]) + 0.5)

    def clip_cell(self, ix: int, iy: int) -> tuple[int, int]:
        return (min(max(ix, 0), self.shape[0] - 1), min(max(iy, 0), self.shape[1] - 1))

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.resolution, self.origin.copy(), self.cells.copy())

    def occupied_or_unknown_mask(self) -> np.ndarray:
        return self.cells != FREE

    def to_pgm(self, path) -> None:
        """Write a binary PGM snapshot plus a JSON metadata sidecar."""
        path = FilePath(path)
        shade = np.full(self.cells.T.shape, 205, dtype=np.uint8)  # unknown
        shade[self.cells.T == FREE] = 254
        shade[self.cells.T == OCCUPIED] = 0
        rows = shade[::-1]  # north-up image
        with open(path, "wb") as fh:
            fh.write(f"P5\n{rows.shape[1]} {rows.shape[0]}\n255\n".encode())
            fh.write(rows.tobytes())
        meta = {
            "resolution_m": self.resolution,
            "origin_m": self.origin.tolist(),
            "width": int(self.shape[0]),
            "height": int(self.shape[1]),
            "encoding": "row 0 is the maximum-y edge; free=254 occupied=0 unknown=205",
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


@njit(cache=True)
def _trace_beams(cells, ix0, iy0, ends, hits):
    """Bresenham-trace every beam, marking free cells and hit endpoints.

    Occupied cells are sticky: a later free observation never reverts one.
    """
    nx, ny = cells.shape
    for b in range(ends.shape[0]):
        x0, y0 = ix0, iy0
        x1, y1 = ends[b, 0], ends[b, 1]
        dx = abs(x1 - x0)
        dy = abs(y1 - y0)
        sx = 1 if x0 < x1 else -1
        sy = 1 if y0 < y1 else -1
        err = dx - dy
        x, y = x0, y0
        while True:
            last = x == x1 and y == y1
            if 0 <= x < nx and 0 <= y < ny:
                if last and hits[b]:
                    cells[x, y] = 1  # OCCUPIED
                elif cells[x, y] != 1:
                    cells[x, y] = 0  # FREE
            if last:
                break
            e2 = 2 * err
            if e2 > -dy:
                err -= dy
                x += sx
            if e2 < dx:
                err += dx
                y += sy
    return cells


def update_grid(grid: OccupancyGrid, pose, scan: np.ndarray,
                max_range: Optional[float] = None) -> OccupancyGrid:
    """Fuse one scan into the grid (in place) and return it.

    `scan` is the (angle, range) array from raycast. Ranges at the sensor
    cap mark no endpoint obstacle.
    """
    if max_range is None:
        max_range = float(np.max(scan[:, 1]))
    origin = np.asarray(pose[:2], dtype=float)
    ix0, iy0 = grid.clip_cell(*grid.world_to_cell(origin))
    angles = scan[:, 0]
    ranges = scan[:, 1]
    hits = ranges < max_range - 1e-9
    # nudge hit endpoints just past the surface so they land in the
    # obstacle cell even when the hit lies exactly on a cell edge
    eff = np.where(hits, ranges + 1e-9, ranges)
    ex = origin[0] + eff * np.cos(angles)
    ey = origin[1] + eff * np.sin(angles)
    ends = np.empty((len(angles), 2), dtype=np.int64)
    ends[:, 0] = np.clip(np.floor((ex - grid.origin[0]) / grid.resolution), 0,
                         grid.shape[0] - 1)
    ends[:, 1] = np.clip(np.floor((ey - grid.origin[1]) / grid.resolution), 0,
                         grid.shape[1] - 1)
    _trace_beams(grid.cells, ix0, iy0, ends, hits.astype(np.bool_))
    return grid


def _metric_half_cell(s_out: SymMatrix, resolution: float) -> float:
    """Half-cell deflation in S units (resolution/2 for the identity)."""
    lam_max = float(np.linalg.eigvalsh(s_out.entries)[-1])
    return 0.5 * resolution * math.sqrt(lam_max)


def dist_to_obstacles(world, q, s_out: SymMatrix,
                      max_range: Optional[float] = None) -> float:
    """S-distance from q to the obstacle set.

    For a grid, obstacles are the occupied and unknown cell centers with a
    conservative half-cell deflation; for a ground-truth map the exact
    rectangle distance is used (sampled boundary for non-diagonal S). An
    optional sensing cap limits the credit taken from empty space.
    """
    q = np.asarray(q, dtype=float)
    s = s_out.entries
    cap = math.inf
    if max_range is not None:
        lam_min = float(np.linalg.eigvalsh(s)[0])
        cap = math.sqrt(lam_min) * max_range

    if isinstance(world, OccupancyGrid):
        mask = world.occupied_or_unknown_mask()
        idx = np.argwhere(mask)
        if len(idx) == 0:
            return cap if math.isfinite(cap) else math.inf
        centers = world.origin + world.resolution * (idx + 0.5)
        diff = centers - q
        d2 = np.einsum("ij,jk,ik->i", diff, s, diff)
        d = math.sqrt(float(np.min(d2))) - _metric_half_cell(s_out, world.resolution)
        return min(max(d, 0.0), cap)

    if isinstance(world, GroundTruthMap):
        diag = abs(s[0, 1]) < 1e-15
        best = math.inf
        sx, sy = math.sqrt(s[0, 0]), math.sqrt(s[1, 1])
        for rect in world.obstacles:
            x0, y0, x1, y1 = rect
            if diag:
                ddx = max(x0 - q[0], 0.0, q[0] - x1)
                ddy = max(y0 - q[1], 0.0, q[1] - y1)
                best = min(best, math.hypot(sx * ddx, sy * ddy))
            else:
                best = min(best, _rect_sampled_dist(rect, q, s))
        # workspace boundary is solid
        xmin, ymin, xmax, ymax = world.bounds
        best = min(best,
                   sx * max(q[0] - xmin, 0.0), sx * max(xmax - q[0], 0.0),
                   sy * max(q[1] - ymin, 0.0), sy * max(ymax - q[1], 0.0))
        return min(best, cap)

    raise TypeError(f"unsupported world type {type(world).__name__}")


def _rect_sampled_dist(rect, q, s, step: float = 0.02) -> float:
    x0, y0, x1, y1 = rect
    if x0 <= q[0] <= x1 and y0 <= q[1] <= y1:
        return 0.0
    pts = []
    nx = max(int((x1 - x0) / step), 1)
    ny = max(int((y1 - y0) / step), 1)
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    pts.append(np.stack([xs, np.full_like(xs, y0)], axis=1))
    pts.append(np.stack([xs, np.full_like(xs, y1)], axis=1))
    pts.append(np.stack([np.full_like(ys, x0), ys], axis=1))
    pts.append(np.stack([np.full_like(ys, x1), ys], axis=1))
    diff = np.concatenate(pts) - q
    return math.sqrt(float(np.min(np.einsum("ij,jk,ik->i", diff, s, diff))))


_SQRT2 = math.sqrt(2.0)
_NEIGHBORS = ((1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
              (1, 1, _SQRT2), (1, -1, _SQRT2), (-1, 1, _SQRT2), (-1, -1, _SQRT2))


def _octile(ax, ay, bx, by):
    dx = abs(ax - bx)
    dy = abs(ay - by)
    return max(dx, dy) + (_SQRT2 - 1.0) * min(dx, dy)


def astar_grid(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int],
               resolution: float = 1.0):
    """8-connected A* with the octile heuristic. Returns (cells, cost_m).

    Raises PlanningFailed when no route exists or an endpoint is blocked.
    """
    import heapq

    nx, ny = blocked.shape
    sx, sy = start
    gx, gy = goal
    if not (0 <= sx < nx and 0 <= sy < ny and 0 <= gx < nx and 0 <= gy < ny):
        raise PlanningFailed("start or goal outside the grid")
    if blocked[sx, sy]:
        raise PlanningFailed("start cell is blocked")
    if blocked[gx, gy]:
        raise PlanningFailed("goal cell is blocked")
    dist = {start: 0.0}
    parent = {}
    heap = [(_octile(sx, sy, gx, gy), start)]
    closed = set()
    while heap:
        _, cur = heapq.heappop(heap)
        if cur == goal:
            cells = [cur]
            while cur in parent:
                cur = parent[cur]
                cells.append(cur)
            cells.reverse()
            return cells, dist[goal] * resolution
        if cur in closed:
            continue
        closed.add(cur)
        cx, cy = cur
        base = dist[cur]
        for ddx, ddy, w in _NEIGHBORS:
            nxt = (cx + ddx, cy + ddy)
            if not (0 <= nxt[0] < nx and 0 <= nxt[1] < ny) or blocked[nxt]:
                continue
            cand = base + w
            if cand < dist.get(nxt, math.inf):
                dist[nxt] = cand
                parent[nxt] = cur
                heapq.heappush(heap, (cand + _octile(nxt[0], nxt[1], gx, gy), nxt))
    raise PlanningFailed("no route between start and goal")


def inflate_mask(grid: OccupancyGrid, inflation_radius_m: float) -> np.ndarray:
    """Occupied-or-unknown mask dilated by the inflation radius (plus half
    a cell so that cleared cell centers keep the full clearance)."""
    mask = grid.occupied_or_unknown_mask()
    r_cells = (inflation_radius_m + 0.5 * grid.resolution) / grid.resolution
    r_int = int(math.floor(r_cells))
    if r_int < 1:
        return mask.copy()
    span = np.arange(-r_int, r_int + 1)
    dx, dy = np.meshgrid(span, span, indexing="ij")
    disk = dx * dx + dy * dy <= r_cells * r_cells
    return ndimage.binary_dilation(mask, structure=disk)


def _line_of_sight(blocked: np.ndarray, grid: OccupancyGrid,
                   a: np.ndarray, b: np.ndarray) -> bool:
    length = float(np.hypot(*(b - a)))
    n = max(int(length / (grid.resolution / 4.0)), 1)
    for tau in np.linspace(0.0, 1.0, n + 1):
        p = (1.0 - tau) * a + tau * b
        ix, iy = grid.world_to_cell(p)
        if not (0 <= ix < blocked.shape[0] and 0 <= iy < blocked.shape[1]):
            return False
        if blocked[ix, iy]:
            return False
    return True


def plan_path(grid: OccupancyGrid, start, goal, inflation_radius_m: float) -> Path:
    """A* on the inflated grid, then greedy line-of-sight shortcutting.

    Waypoints are cell centers except for the exact start point, so the
    returned path begins at `start`.
    """
    blocked = inflate_mask(grid, inflation_radius_m)
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    s_cell = grid.world_to_cell(start)
    g_cell = grid.world_to_cell(goal)
    cells, _cost = astar_grid(blocked, s_cell, g_cell, grid.resolution)
    pts = [start] + [grid.cell_center(ix, iy) for ix, iy in cells[1:]]
    if len(pts) >= 2:
        pts[-1] = grid.cell_center(*g_cell)
    # greedy shortcutting: from each anchor, jump to the furthest visible point
    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not _line_of_sight(blocked, grid, pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return Path(np.array(out))
