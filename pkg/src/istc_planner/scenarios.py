"""Built-in scenarios: the unsignalized intersection, the dense square and a
head-on corridor that admits no corridors at all."""
from __future__ import annotations

import math

import numpy as np

from .scenario import ObstacleBox, OccupancyGrid, PlannerConfig, Scenario, VehicleSpec

CAR = dict(length=4.0, width=2.0, wheelbase=2.7)

PRIORITY_GROUPS = {
    "I": (0.20, 0.01, 0.50),
    "II": (0.50, 0.40, 0.01),
}


def _grid_with(extent, resolution, obstacles):
    x0, x1, y0, y1 = extent
    w = int(round((x1 - x0) / resolution))
    h = int(round((y1 - y0) / resolution))
    g = OccupancyGrid((x0, y0), resolution, w, h, np.zeros((h, w), dtype=bool))
    g.rasterize([o for o in obstacles if o.is_static])
    return g


def _line(p0, p1, step=0.5):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(int(math.ceil(np.linalg.norm(p1 - p0) / step)), 1)
    th = math.atan2(*(p1 - p0)[::-1])
    return [(*(p0 + (p1 - p0) * t), th) for t in np.linspace(0, 1, n + 1)]


def _arc(center, radius, a0, a1, step=0.5):
    n = max(int(math.ceil(abs(a1 - a0) * radius / step)), 1)
    sgn = 1.0 if a1 > a0 else -1.0
    return [(center[0] + radius * math.cos(a), center[1] + radius * math.sin(a),
             a + sgn * math.pi / 2) for a in np.linspace(a0, a1, n + 1)]


def _join(*parts):
    out = list(parts[0])
    for p in parts[1:]:
        out.extend(p[1:])
    return out


def intersection(group="I", half=25.0, road=10.0) -> Scenario:
    """Two crossing two-lane roads, right-hand traffic: vehicle 1 drives
    east, vehicle 2 comes from the north and drives south, vehicle 3 comes
    from the south and turns left (west)."""
    eta = PRIORITY_GROUPS[group]
    r = road / 2
    lane = road / 4
    obstacles = [
        ObstacleBox(1, -half, -r, -half, -r),
        ObstacleBox(2, r, half, -half, -r),
        ObstacleBox(3, -half, -r, r, half),
        ObstacleBox(4, r, half, r, half),
    ]
    grid = _grid_with((-half, half, -half, half), 0.5, obstacles)
    start = half - 5.0
    vehicles = [
        VehicleSpec(1, **CAR, start_pose=(-start, -lane, 0.0), goal_pose=(start, -lane, 0.0),
                    v_ref=5.0, priority=eta[0]),
        VehicleSpec(2, **CAR, start_pose=(-lane, start, -math.pi / 2),
                    goal_pose=(-lane, -start, -math.pi / 2), v_ref=5.0, priority=eta[1]),
        VehicleSpec(3, **CAR, start_pose=(lane, -start, math.pi / 2),
                    goal_pose=(-start, lane, math.pi), v_ref=5.0, priority=eta[2]),
    ]
    # lane-following guidance; the left turn is a quarter circle from the
    # northbound lane into the westbound one
    turn_r = 2 * lane
    c = lane - turn_r
    guidance = {
        1: _line((-start, -lane), (start, -lane)),
        2: _line((-lane, start), (-lane, -start)),
        3: _join(_line((lane, -start), (lane, c)),
                 _arc((c, c), turn_r, 0.0, math.pi / 2),
                 _line((c, lane), (-start, lane))),
    }
    # two car squares, the road-edge margins and the inter-vehicle gap must
    # fit across one road for two cars to pass side by side
    cfg = PlannerConfig(r_x_v2o=0.2, r_y_v2o=0.2)
    return Scenario(vehicles, obstacles, grid, cfg, guidance, name=f"intersection-group-{group}")


def dense(with_obstacles=True) -> Scenario:
    """Four vehicles swapping sides of a 50 m x 38 m map, optionally around
    a pair of central blocks.  Each channel holds an opposing pair whose
    routes cross, so every vehicle meets another head-on."""
    extent = (0.0, 50.0, 0.0, 38.0)
    obstacles = []
    if with_obstacles:
        obstacles = [ObstacleBox(1, 18.0, 23.0, 14.0, 24.0), ObstacleBox(2, 28.0, 33.0, 14.0, 24.0)]
    grid = _grid_with(extent, 0.5, obstacles)
    vehicles = [
        VehicleSpec(1, **CAR, start_pose=(4.0, 5.0, 0.0), goal_pose=(46.0, 9.0, 0.0),
                    v_ref=5.0, priority=0.3),
        VehicleSpec(2, **CAR, start_pose=(46.0, 5.0, math.pi), goal_pose=(4.0, 9.0, math.pi),
                    v_ref=5.0, priority=0.2),
        VehicleSpec(3, **CAR, start_pose=(4.0, 33.0, 0.0), goal_pose=(46.0, 29.0, 0.0),
                    v_ref=5.0, priority=0.3),
        VehicleSpec(4, **CAR, start_pose=(46.0, 33.0, math.pi), goal_pose=(4.0, 29.0, math.pi),
                    v_ref=5.0, priority=0.2),
    ]
    name = "dense-obstacles" if with_obstacles else "dense-open"
    return Scenario(vehicles, obstacles, grid, PlannerConfig(), {}, name=name)


def head_on() -> Scenario:
    """Two cars meet head-on in a one-lane road while traffic closes in
    behind each of them, so neither can wait for the other."""
    extent = (-30.0, 30.0, -3.0, 3.0)
    grid = _grid_with(extent, 0.5, [])
    K = 6
    # a box behind each car advancing at 5 m/s
    chase1 = tuple((-29.5 + 5 * k, -26.0 + 5 * k, -3.0, 3.0) for k in range(K + 1))
    chase2 = tuple((26.0 - 5 * k, 29.5 - 5 * k, -3.0, 3.0) for k in range(K + 1))
    obstacles = [ObstacleBox(1, *chase1[0], per_time=chase1),
                 ObstacleBox(2, *chase2[0], per_time=chase2)]
    vehicles = [
        VehicleSpec(1, **CAR, start_pose=(-10.0, 0.0, 0.0), goal_pose=(20.0, 0.0, 0.0),
                    v_ref=5.0, priority=0.5),
        VehicleSpec(2, **CAR, start_pose=(10.0, 0.0, math.pi), goal_pose=(-20.0, 0.0, math.pi),
                    v_ref=5.0, priority=0.5),
    ]
    guidance = {1: _line((-10.0, 0.0), (20.0, 0.0)), 2: _line((10.0, 0.0), (-20.0, 0.0))}
    return Scenario(vehicles, obstacles, grid, PlannerConfig(), guidance, name="head-on")


BUILTIN = {
    "intersection_group_I": lambda: intersection("I"),
    "intersection_group_II": lambda: intersection("II"),
    "dense_obstacles": lambda: dense(True),
    "dense_open": lambda: dense(False),
    "head_on": head_on,
}
