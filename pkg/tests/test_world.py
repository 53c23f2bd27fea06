import heapq
import math

import numpy as np
import pytest

from govnav.errors import PlanningFailed, PoseInObstacle
from govnav.numkit import SymMatrix
from govnav.world import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    GroundTruthMap,
    LidarSpec,
    OccupancyGrid,
    astar_grid,
    dist_to_obstacles,
    inflate_mask,
    plan_path,
    raycast,
    update_grid,
)


def dijkstra_cost(blocked, start, goal, resolution=1.0):
    """Heuristic-free shortest-path oracle on the same 8-connected grid."""
    sq2 = math.sqrt(2.0)
    moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, sq2), (1, -1, sq2), (-1, 1, sq2), (-1, -1, sq2)]
    nx, ny = blocked.shape
    dist = {start: 0.0}
    heap = [(0.0, start)]
    done = set()
    while heap:
        d, cur = heapq.heappop(heap)
        if cur == goal:
            return d * resolution
        if cur in done:
            continue
        done.add(cur)
        for dx, dy, w in moves:
            nxt = (cur[0] + dx, cur[1] + dy)
            if not (0 <= nxt[0] < nx and 0 <= nxt[1] < ny) or blocked[nxt]:
                continue
            nd = d + w
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, nxt))
    return None


def empty_map(half=20.0):
    return GroundTruthMap((-half, -half, half, half), ())


def wall_map():
    # a wall occupying x >= 5 across the middle
    return GroundTruthMap((-10.0, -10.0, 10.0, 10.0), ((5.0, -10.0, 6.0, 10.0),))


class TestRaycast:
    def test_perpendicular_wall(self):
        scan = raycast(wall_map(), (0.0, 0.0, 0.0), LidarSpec(num_beams=1, max_range_m=30.0))
        assert scan.shape == (1, 2)
        assert scan[0, 1] == pytest.approx(5.0, abs=1e-12)

    def test_empty_map_all_capped(self):
        # workspace walls are 20+ m away on the diagonals, cap at 15
        scan = raycast(empty_map(), (0.0, 0.0, 0.3), LidarSpec(num_beams=90, max_range_m=15.0))
        assert np.allclose(scan[:, 1], 15.0)

    def test_diagonal_wall_hit(self):
        scan = raycast(wall_map(), (0.0, 0.0, math.pi / 4),
                       LidarSpec(num_beams=1, max_range_m=30.0))
        assert scan[0, 1] == pytest.approx(5.0 * math.sqrt(2.0), abs=1e-9)

    def test_pose_in_obstacle(self):
        with pytest.raises(PoseInObstacle):
            raycast(wall_map(), (5.5, 0.0, 0.0), LidarSpec(num_beams=1))

    def test_boundary_counts_as_hit(self):
        scan = raycast(empty_map(5.0), (0.0, 0.0, 0.0), LidarSpec(num_beams=1, max_range_m=30.0))
        assert scan[0, 1] == pytest.approx(5.0)

    def test_min_range_consistent_with_distance(self):
        gt = wall_map()
        spec = LidarSpec(num_beams=180, max_range_m=30.0)
        rng = np.random.default_rng(8)
        for _ in range(20):
            pose = rng.uniform([-8, -8], [4, 8])
            scan = raycast(gt, (*pose, rng.uniform(0, 2 * math.pi)), spec)
            exact = dist_to_obstacles(gt, pose, SymMatrix.identity(2))
            slack = spec.max_range_m * (1.0 - math.cos(math.pi / spec.num_beams))
            assert np.min(scan[:, 1]) >= exact - slack - 1e-9


class TestUpdateGrid:
    def test_single_beam_counts(self):
        gt = wall_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        scan = np.array([[0.0, 5.0]])
        update_grid(grid, (0.0, 0.0, 0.0), scan, max_range=30.0)
        iy = grid.world_to_cell((0.0, 0.0))[1]
        row = grid.cells[:, iy]
        ix0 = grid.world_to_cell((0.0, 0.0))[0]
        hit_ix = grid.world_to_cell((5.0 + 1e-6, 0.0))[0]
        assert np.all(row[ix0:hit_ix] == FREE)
        assert (row[ix0:hit_ix] == FREE).sum() == 10
        assert row[hit_ix] == OCCUPIED

    def test_max_range_beam_leaves_no_obstacle(self):
        gt = empty_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        scan = np.array([[0.0, 8.0]])
        update_grid(grid, (0.0, 0.0, 0.0), scan, max_range=8.0)
        assert not np.any(grid.cells == OCCUPIED)
        assert (grid.cells == FREE).sum() >= 16

    def test_shared_wall_cell_consistent(self):
        gt = wall_map()
        spec = LidarSpec(num_beams=180, max_range_m=30.0)
        grid = OccupancyGrid.unknown_for(gt, resolution=0.25)
        for pose in [(0.0, 0.0, 0.0), (2.0, 3.0, 0.0)]:
            update_grid(grid, pose, raycast(gt, pose, spec), max_range=spec.max_range_m)
        wall_cell = grid.world_to_cell((5.05, 0.0))
        assert grid.cells[wall_cell] == OCCUPIED

    def test_occupied_is_sticky(self):
        gt = wall_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        ix, iy = grid.world_to_cell((3.0, 0.0))
        grid.cells[ix, iy] = OCCUPIED
        scan = np.array([[0.0, 8.0]])
        update_grid(grid, (0.0, 0.0, 0.0), scan, max_range=30.0)
        assert grid.cells[ix, iy] == OCCUPIED

    def test_occupied_set_nondecreasing(self):
        gt = wall_map()
        spec = LidarSpec(num_beams=120, max_range_m=30.0)
        grid = OccupancyGrid.unknown_for(gt, resolution=0.25)
        prev = np.zeros_like(grid.cells, dtype=bool)
        rng = np.random.default_rng(1)
        for _ in range(6):
            pose = (*rng.uniform([-8, -8], [4, 8]), rng.uniform(0, 2 * math.pi))
            update_grid(grid, pose, raycast(gt, pose, spec), max_range=spec.max_range_m)
            occ = grid.cells == OCCUPIED
            assert np.all(occ[prev])
            prev = occ


class TestDistToObstacles:
    def test_single_occupied_cell(self):
        gt = empty_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        grid.cells[:] = FREE
        # occupied cell centered at (5.0, 0.0)
        ix, iy = grid.world_to_cell((5.0, 0.0))
        center = grid.cell_center(ix, iy)
        grid.cells[ix, iy] = OCCUPIED
        d = dist_to_obstacles(grid, center - np.array([5.0, 0.0]), SymMatrix.identity(2))
        assert d == pytest.approx(5.0 - 0.25, abs=1e-9)

    def test_unknown_ring_binds(self):
        gt = empty_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        q = np.zeros(2)
        # clear a disk of radius 6 around the origin
        for ix in range(grid.shape[0]):
            for iy in range(grid.shape[1]):
                if np.linalg.norm(grid.cell_center(ix, iy)) <= 6.0:
                    grid.cells[ix, iy] = FREE
        d = dist_to_obstacles(grid, q, SymMatrix.identity(2))
        assert 6.0 - 0.75 <= d <= 6.0

    def test_weighted_metric_brute_force(self):
        gt = empty_map()
        res = 0.1
        grid = OccupancyGrid.unknown_for(gt, resolution=res)
        grid.cells[:] = FREE
        s = SymMatrix.diagonal([1.0, 4.0])
        ixy = grid.world_to_cell((0.0, 3.0))
        ixx = grid.world_to_cell((4.0, 0.0))
        grid.cells[ixy] = OCCUPIED
        grid.cells[ixx] = OCCUPIED
        q = grid.cell_center(*grid.world_to_cell((0.0, 0.0)))
        centers = [grid.cell_center(*ixy), grid.cell_center(*ixx)]
        expected = min(
            math.sqrt(float((c - q) @ s.entries @ (c - q))) for c in centers
        ) - 0.5 * res * 2.0
        d = dist_to_obstacles(grid, q, s)
        assert d == pytest.approx(expected, abs=1e-9)
        assert d == pytest.approx(4.0, abs=0.2)

    def test_sensing_cap(self):
        gt = empty_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        grid.cells[:] = FREE
        d = dist_to_obstacles(grid, np.zeros(2), SymMatrix.identity(2), max_range=7.5)
        assert d == 7.5


class TestAstar:
    def test_empty_grid_plan(self):
        gt = empty_map(8.0)
        grid = OccupancyGrid.unknown_for(gt, resolution=0.25)
        grid.cells[:] = FREE
        path = plan_path(grid, (-5.0, 0.0), (5.0, 0.0), inflation_radius_m=0.0)
        assert len(path.waypoints) == 2
        assert path.length == pytest.approx(10.0, abs=0.3)

    def test_goal_in_inflated_obstacle(self):
        gt = wall_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.25)
        grid.cells[:] = FREE
        ix, iy = grid.world_to_cell((5.5, 0.0))
        grid.cells[ix - 2:ix + 3, iy - 2:iy + 3] = OCCUPIED
        with pytest.raises(PlanningFailed):
            plan_path(grid, (0.0, 0.0), (5.5, 0.0), inflation_radius_m=1.0)

    def test_gap_route_matches_dijkstra(self):
        blocked = np.zeros((40, 40), dtype=bool)
        blocked[20, :] = True
        blocked[20, 18:22] = False  # one gap
        start, goal = (5, 20), (35, 20)
        _, cost = astar_grid(blocked, start, goal, resolution=0.5)
        ref = dijkstra_cost(blocked, start, goal, resolution=0.5)
        assert cost == pytest.approx(ref, abs=1e-9)

    def test_random_grids_match_dijkstra(self):
        rng = np.random.default_rng(123)
        for _ in range(25):
            blocked = rng.random((24, 24)) < 0.3
            start = (int(rng.integers(24)), int(rng.integers(24)))
            goal = (int(rng.integers(24)), int(rng.integers(24)))
            if blocked[start] or blocked[goal]:
                continue
            ref = dijkstra_cost(blocked, start, goal)
            if ref is None:
                with pytest.raises(PlanningFailed):
                    astar_grid(blocked, start, goal)
                continue
            _, cost = astar_grid(blocked, start, goal)
            assert cost == pytest.approx(ref, abs=1e-9)

    def test_inflation_soundness(self):
        gt = wall_map()
        spec = LidarSpec(num_beams=240, max_range_m=30.0)
        grid = OccupancyGrid.unknown_for(gt, resolution=0.25)
        for pose in [(-5.0, 0.0, 0.0), (0.0, 5.0, 0.0), (0.0, -5.0, 0.0)]:
            update_grid(grid, pose, raycast(gt, pose, spec), max_range=spec.max_range_m)
        inflation = 0.8
        path = plan_path(grid, (-5.0, 0.0), (-1.0, 6.0), inflation_radius_m=inflation)
        occ_centers = np.argwhere(grid.cells == OCCUPIED)
        occ_pts = grid.origin + grid.resolution * (occ_centers + 0.5)
        sigmas = np.linspace(0, 1, 200)
        for sigma in sigmas:
            p = path.point_at(sigma)
            d = np.min(np.hypot(*(occ_pts - p).T))
            assert d >= inflation


class TestPgmExport:
    def test_roundtrip(self, tmp_path):
        gt = wall_map()
        grid = OccupancyGrid.unknown_for(gt, resolution=0.5)
        pose = (0.0, 0.0, 0.0)
        update_grid(grid, pose, raycast(gt, pose, LidarSpec(num_beams=90)), max_range=30.0)
        out = tmp_path / "snapshot.pgm"
        grid.to_pgm(out)
        data = out.read_bytes()
        assert data.startswith(b"P5\n")
        header, rest = data.split(b"255\n", 1)
        w, h = map(int, header.split(b"\n")[1].split())
        assert (w, h) == (grid.shape[0], grid.shape[1])
        img = np.frombuffer(rest, dtype=np.uint8).reshape(h, w)
        occupied_px = int((img == 0).sum())
        assert occupied_px == int((grid.cells == OCCUPIED).sum())
        meta = (tmp_path / "snapshot.pgm.json").read_text()
        assert "resolution_m" in meta
