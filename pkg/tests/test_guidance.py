import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from istc_planner.guidance import (GOAL_HEADING_TOL, GOAL_POS_TOL, GuidanceError, GuidancePath,
                                   SearchFailure, assign_constant_speed, hybrid_astar,
                                   plan_guidance, sample_reference)
from istc_planner.scenario import (ObstacleBox, OccupancyGrid, VehicleSpec,
                                   footprint_hits_grid)
from istc_planner.scenarios import intersection

CAR = VehicleSpec(1, 4.0, 2.0, 2.7, (0.0, 0.0, 0.0), (10.0, 0.0, 0.0))


def _straight(length, n=None):
    n = n or max(int(length * 4), 1)
    return GuidancePath.from_poses([(s, 0.0, 0.0) for s in np.linspace(0.0, length, n + 1)])


def _wall_grid():
    g = OccupancyGrid((0.0, -15.0), 0.5, 80, 60)
    g.rasterize([ObstacleBox(1, 19.0, 21.0, -15.0, 8.0)])
    return g


def _octile_distance(grid, a, b):
    """Shortest 8-connected path between the cells holding a and b over free
    cells, built directly on the occupancy array."""
    h, w = grid.occupancy.shape
    free = ~grid.occupancy
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        y0, y1 = max(0, -dy), h - max(0, dy)
        x0, x1 = max(0, -dx), w - max(0, dx)
        src = idx[y0:y1, x0:x1]
        dst = idx[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        ok = free[y0:y1, x0:x1] & free[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        rows.append(src[ok])
        cols.append(dst[ok])
        vals.append(np.full(ok.sum(), math.hypot(dx, dy) * grid.resolution))
    G = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(h * w, h * w))

    def cell(p):
        return (int((p[1] - grid.origin[1]) / grid.resolution) * w
                + int((p[0] - grid.origin[0]) / grid.resolution))
    return float(dijkstra(G, directed=False, indices=cell(a))[cell(b)])


def test_straight_path_on_empty_grid():
    g = OccupancyGrid((-10.0, -10.0), 0.5, 60, 40)
    p = hybrid_astar(g, CAR, (0.0, 0.0, 0.0), (10.0, 0.0, 0.0))
    assert p.length == pytest.approx(10.0, abs=g.resolution)
    assert np.allclose(p.poses[:, 1], 0.0, atol=1e-9)
    assert np.allclose(p.poses[-1], (10.0, 0.0, 0.0), atol=1e-9)


def test_wall_with_gap_against_grid_lower_bound():
    g = _wall_grid()
    start, goal = (5.0, 0.0, 0.0), (35.0, 0.0, 0.0)
    p = hybrid_astar(g, CAR, start, goal)
    assert p.length >= math.dist(start[:2], goal[:2])
    # every sampled footprint is clear of the wall
    for pose in p.poses:
        assert not footprint_hits_grid(g, CAR.footprint(pose))
    # the reference point stays in free space, so the continuous shortest
    # path is a lower bound; octile paths overestimate it by at most
    # 1/cos(pi/8) plus one cell diagonal at each end
    d = _octile_distance(g, start, goal)
    assert np.isfinite(d)
    bound = d * math.cos(math.pi / 8) - 2 * math.sqrt(2) * g.resolution
    assert p.length >= bound
    assert p.length > 35.0  # the detour through the gap
    end = p.poses[-1]
    assert math.dist(end[:2], goal[:2]) <= GOAL_POS_TOL
    assert abs(end[2] - goal[2]) <= GOAL_HEADING_TOL


def test_goal_in_obstacle():
    g = _wall_grid()
    with pytest.raises(SearchFailure):
        hybrid_astar(g, CAR, (5.0, 0.0, 0.0), (20.0, 0.0, 0.0))


def test_disconnected_grid_fails_fast():
    g = OccupancyGrid((0.0, -15.0), 0.5, 80, 60)
    g.rasterize([ObstacleBox(1, 19.0, 21.0, -15.0, 15.0)])
    with pytest.raises(SearchFailure, match="not connected"):
        hybrid_astar(g, CAR, (5.0, 0.0, 0.0), (35.0, 0.0, 0.0))


def test_gap_narrower_than_car_reports_explored_count():
    g = OccupancyGrid((0.0, -15.0), 0.5, 80, 60)
    g.rasterize([ObstacleBox(1, 19.0, 21.0, -15.0, 0.0), ObstacleBox(2, 19.0, 21.0, 1.0, 15.0)])
    with pytest.raises(SearchFailure) as info:
        hybrid_astar(g, CAR, (5.0, 7.0, 0.0), (35.0, 7.0, 0.0), max_nodes=2000)
    assert info.value.explored > 0


def test_constant_speed_25m():
    tr = assign_constant_speed(_straight(25.0), 5.0, 1.0)
    assert tr.K == 5
    assert np.allclose(tr.samples[:, 0], [0, 5, 10, 15, 20, 25], atol=1e-12)
    assert sample_reference(tr, 0) == pytest.approx((0.0, 0.0, 0.0))
    assert sample_reference(tr, tr.K) == pytest.approx((25.0, 0.0, 0.0))
    assert sample_reference(tr, 3)[0] == pytest.approx(15.0)


def test_constant_speed_26m():
    tr = assign_constant_speed(_straight(26.0), 5.0, 1.0)
    assert tr.K == 6
    assert tr.samples[-1, 0] == pytest.approx(26.0)
    assert tr.samples[-2, 0] == pytest.approx(25.0)


def test_zero_length_path():
    start = (3.0, -2.0, 0.7)
    tr = assign_constant_speed(GuidancePath.from_poses([start]), 5.0, 1.0)
    assert tr.K == 0
    assert sample_reference(tr, 0) == pytest.approx(start)


def test_errors():
    tr = assign_constant_speed(_straight(25.0), 5.0, 1.0)
    with pytest.raises(IndexError):
        sample_reference(tr, 6)
    with pytest.raises(IndexError):
        sample_reference(tr, -1)
    with pytest.raises(GuidanceError):
        assign_constant_speed(GuidancePath.from_poses(np.zeros((0, 3))), 5.0, 1.0)
    with pytest.raises(GuidanceError):
        assign_constant_speed(_straight(10.0), 0.0, 1.0)


def test_samples_are_evenly_spaced_along_a_curve():
    th = np.linspace(0.0, math.pi / 2, 400)
    poses = np.column_stack([10 * np.sin(th), 10 * (1 - np.cos(th)), th])
    path = GuidancePath.from_poses(poses)
    tr = assign_constant_speed(path, 5.0, 1.0)
    assert tr.K == math.ceil(path.length / 5.0)
    seg = np.hypot(*np.diff(tr.samples[:, :2], axis=0).T)
    # chords of 5 m arcs on a radius-10 circle
    chord = 2 * 10 * math.sin(5.0 / 20)
    assert np.allclose(seg[:-1], chord, atol=1e-3)


def test_plan_guidance_shared_horizon():
    s = intersection("I")
    g = plan_guidance(s)
    Ks = {t.K for t in g.values()}
    assert len(Ks) == 1
    for v in s.vehicles:
        assert np.allclose(g[v.id].samples[0, :2], v.start_pose[:2])
        assert np.allclose(g[v.id].samples[-1, :2], s.guidance[v.id][-1][:2], atol=1e-9)
