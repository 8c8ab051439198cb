"""Per-vehicle guidance: hybrid A* path search plus constant-speed timing."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scenario import OccupancyGrid, Scenario, VehicleSpec, footprint_hits_grid

N_HEADING_BINS = 72
REVERSE_PENALTY = 2.0
GOAL_POS_TOL = 0.5
GOAL_HEADING_TOL = 0.2


class GuidanceError(Exception):
    pass


class SearchFailure(GuidanceError):
    def __init__(self, message, explored=0):
        super().__init__(message)
        self.explored = explored


def wrap_angle(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class GuidancePath:
    poses: np.ndarray  # (N, 3)
    arc_lengths: np.ndarray  # (N,)
    cost: float = 0.0

    @classmethod
    def from_poses(cls, poses, cost=None):
        poses = np.asarray(poses, dtype=float).reshape(-1, 3)
        seg = np.hypot(np.diff(poses[:, 0]), np.diff(poses[:, 1]))
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        return cls(poses, arc, float(arc[-1]) if cost is None else cost)

    @property
    def length(self) -> float:
        return float(self.arc_lengths[-1])

    def pose_at(self, s: float):
        """Position at arc length ``s`` with the direction of travel as heading."""
        arc = self.arc_lengths
        p = self.poses
        if arc[-1] <= 0.0 or len(p) == 1:
            return (float(p[0, 0]), float(p[0, 1]), float(p[0, 2]))
        s = min(max(s, 0.0), arc[-1])
        i = int(np.searchsorted(arc, s, side="right")) - 1
        i = min(max(i, 0), len(arc) - 2)
        # skip zero-length segments when looking for a tangent
        j = i
        while j < len(arc) - 2 and arc[j + 1] - arc[j] <= 1e-12:
            j += 1
        while j > 0 and arc[j + 1] - arc[j] <= 1e-12:
            j -= 1
        seg = arc[i + 1] - arc[i]
        t = 0.0 if seg <= 1e-12 else (s - arc[i]) / seg
        x = p[i, 0] + t * (p[i + 1, 0] - p[i, 0])
        y = p[i, 1] + t * (p[i + 1, 1] - p[i, 1])
        th = math.atan2(p[j + 1, 1] - p[j, 1], p[j + 1, 0] - p[j, 0])
        return (float(x), float(y), float(th))


@dataclass
class GuidanceTrajectory:
    samples: np.ndarray  # (K+1, 3) rows of (x_ref, y_ref, theta_ref)
    path: GuidancePath = None

    @property
    def K(self) -> int:
        return self.samples.shape[0] - 1

    def to_csv(self, time_unit: float) -> str:
        lines = ["k,t,x_ref,y_ref,theta_ref"]
        for k, (x, y, th) in enumerate(self.samples):
            lines.append(f"{k},{k * time_unit:.6f},{float(x)!r},{float(y)!r},{float(th)!r}")
        return "\n".join(lines) + "\n"

    def extended(self, K: int) -> "GuidanceTrajectory":
        """Pad with copies of the final sample up to horizon ``K``."""
        if K < self.K:
            raise GuidanceError(f"cannot shorten horizon {self.K} to {K}")
        pad = np.repeat(self.samples[-1:], K - self.K, axis=0)
        return GuidanceTrajectory(np.vstack([self.samples, pad]), self.path)


def assign_constant_speed(path: GuidancePath, v_ref: float, time_unit: float) -> GuidanceTrajectory:
    if path is None or len(path.poses) == 0:
        raise GuidanceError("empty path")
    if not v_ref > 0:
        raise GuidanceError("v_ref must be positive")
    step = v_ref * time_unit
    total = path.length
    K = int(math.ceil(total / step - 1e-9)) if total > 0 else 0
    samples = [path.pose_at(min(k * step, total)) for k in range(K + 1)]
    samples = np.array(samples)
    if K == 0:
        samples[0] = path.poses[0]
    else:
        samples[0, :2] = path.poses[0, :2]
    return GuidanceTrajectory(samples, path)


def sample_reference(traj: GuidanceTrajectory, k: int) -> tuple:
    if not 0 <= k <= traj.K:
        raise IndexError(f"time unit {k} outside 0..{traj.K}")
    return tuple(float(a) for a in traj.samples[k])


class _Clearance:
    """Conservative footprint test from a distance transform of the grid.

    The car box is covered by disks along its axis; a disk is clear if the
    cell holding its centre is farther from every occupied cell than the
    disk radius plus one cell diagonal.
    """

    def __init__(self, grid: OccupancyGrid, vehicle: VehicleSpec, n_disks=None):
        self.grid = grid
        r = grid.resolution
        if grid.occupancy.any():
            self.dist = ndimage.distance_transform_edt(~grid.occupancy) * r
        else:
            self.dist = np.full(grid.occupancy.shape, np.inf)
        L = vehicle.length
        n = n_disks or max(2, int(math.ceil(L / vehicle.width)) + 1)
        seg = L / n
        self.radius = math.hypot(seg / 2, vehicle.width / 2)
        self.offsets = -vehicle.rear_overhang + seg * (np.arange(n) + 0.5)
        self.margin = self.radius + r * math.sqrt(2)
        x0, x1, y0, y1 = grid.extent
        self.bounds = (x0 + self.radius, x1 - self.radius, y0 + self.radius, y1 - self.radius)

    def free(self, x, y, th) -> bool:
        c, s = math.cos(th), math.sin(th)
        g = self.grid
        bx0, bx1, by0, by1 = self.bounds
        for o in self.offsets:
            px = x + c * o
            py = y + s * o
            if not (bx0 <= px <= bx1 and by0 <= py <= by1):
                return False
            ix = int((px - g.origin[0]) / g.resolution)
            iy = int((py - g.origin[1]) / g.resolution)
            ix = min(max(ix, 0), g.width - 1)
            iy = min(max(iy, 0), g.height - 1)
            if self.dist[iy, ix] < self.margin:
                return False
        return True


def grid_distance_to_goal(grid: OccupancyGrid, goal_xy) -> np.ndarray:
    """8-connected Dijkstra distance (meters) from every free cell to the goal cell."""
    h, w = grid.occupancy.shape
    r = grid.resolution
    gx = min(max(int((goal_xy[0] - grid.origin[0]) / r), 0), w - 1)
    gy = min(max(int((goal_xy[1] - grid.origin[1]) / r), 0), h - 1)
    dist = np.full((h, w), np.inf)
    dist[gy, gx] = 0.0
    pq = [(0.0, gy, gx)]
    occ = grid.occupancy
    moves = [(-1, 0, r), (1, 0, r), (0, -1, r), (0, 1, r)] + \
        [(dy, dx, r * math.sqrt(2)) for dy in (-1, 1) for dx in (-1, 1)]
    while pq:
        d, y, x = heapq.heappop(pq)
        if d > dist[y, x]:
            continue
        for dy, dx, c in moves:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not occ[ny, nx]:
                nd = d + c
                if nd < dist[ny, nx]:
                    dist[ny, nx] = nd
                    heapq.heappush(pq, (nd, ny, nx))
    return dist


def hybrid_astar(grid: OccupancyGrid, vehicle: VehicleSpec, start, goal,
                 max_nodes=200_000) -> GuidancePath:
    """Hybrid A* over arc primitives of length 0.7 * vehicle length.

    Primitives are {full left, straight, full right} x {forward, reverse};
    reverse arcs cost twice their length.  The search stops at the first
    expanded pose within 0.5 m and 0.2 rad of the goal; a straight shot to
    the goal is tried from every pose that already faces it.
    """
    start = tuple(float(a) for a in start)
    goal = tuple(float(a) for a in goal)
    if footprint_hits_grid(grid, vehicle.footprint(goal)):
        raise SearchFailure("goal footprint is in collision", 0)
    if footprint_hits_grid(grid, vehicle.footprint(start)):
        raise SearchFailure("start footprint is in collision", 0)
    clear = _Clearance(grid, vehicle)
    r = grid.resolution
    step = 0.7 * vehicle.length
    n_sub = max(2, int(math.ceil(step / (0.25 * r))))
    ds = step / n_sub
    kappa = math.tan(vehicle.delta_max) / vehicle.wheelbase
    h2d = grid_distance_to_goal(grid, goal)
    # the reference point lies inside the (free) car box, so a start cell
    # cut off from the goal cell proves that no path exists
    ix = int((start[0] - grid.origin[0]) / r)
    iy = int((start[1] - grid.origin[1]) / r)
    near = h2d[max(iy - 1, 0):iy + 2, max(ix - 1, 0):ix + 2]
    if near.size and not np.isfinite(near).any():
        raise SearchFailure("start and goal are not connected in the grid", 0)
    bin_w = 2 * math.pi / N_HEADING_BINS

    def key(x, y, th):
        return (int(math.floor((x - grid.origin[0]) / r)),
                int(math.floor((y - grid.origin[1]) / r)),
                int(math.floor(wrap_angle(th) / bin_w + 0.5)) % N_HEADING_BINS)

    def heuristic(x, y):
        e = math.hypot(goal[0] - x, goal[1] - y)
        ix = int((x - grid.origin[0]) / r)
        iy = int((y - grid.origin[1]) / r)
        if 0 <= ix < grid.width and 0 <= iy < grid.height:
            d = h2d[iy, ix]
            if math.isfinite(d):
                return max(d - r * math.sqrt(2), e)
        return e

    def at_goal(x, y, th):
        return (math.hypot(goal[0] - x, goal[1] - y) <= GOAL_POS_TOL
                and abs(wrap_angle(th - goal[2])) <= GOAL_HEADING_TOL)

    def roll(x, y, th, curv, direction, length):
        n = max(1, int(math.ceil(length / ds)))
        h = length / n
        pts = []
        for _ in range(n):
            if abs(curv) < 1e-12:
                x += direction * h * math.cos(th)
                y += direction * h * math.sin(th)
            else:
                dth = direction * h * curv
                x += (math.sin(th + dth) - math.sin(th)) / curv
                y += (math.cos(th) - math.cos(th + dth)) / curv
                th += dth
            if not clear.free(x, y, th):
                return None
            pts.append((x, y, th))
        return pts

    # node: (x, y, th, g, parent index, segment poses)
    nodes = [(start[0], start[1], start[2], 0.0, -1, [start])]
    open_pq = [(heuristic(start[0], start[1]), 0, 0)]
    closed = set()
    best_g = {key(*start): 0.0}
    counter = 1
    explored = 0
    prims = [(kd * kappa, d) for d in (1, -1) for kd in (1, 0, -1)]
    while open_pq:
        _, _, idx = heapq.heappop(open_pq)
        x, y, th, g, _, _ = nodes[idx]
        k = key(x, y, th)
        if k in closed:
            continue
        closed.add(k)
        explored += 1
        if at_goal(x, y, th):
            return _reconstruct(nodes, idx)
        if explored > max_nodes:
            break
        # straight shot when the goal lies ahead on the current heading
        dxg, dyg = goal[0] - x, goal[1] - y
        along = dxg * math.cos(th) + dyg * math.sin(th)
        lateral = -dxg * math.sin(th) + dyg * math.cos(th)
        if (0 < along <= 3 * step and abs(lateral) <= 0.5 * GOAL_POS_TOL
                and abs(wrap_angle(th - goal[2])) <= GOAL_HEADING_TOL):
            pts = roll(x, y, th, 0.0, 1, along)
            if pts is not None:
                nodes.append((*pts[-1], g + along, idx, pts))
                return _reconstruct(nodes, len(nodes) - 1)
        for curv, direction in prims:
            pts = roll(x, y, th, curv, direction, step)
            if pts is None:
                continue
            nx, ny, nth = pts[-1]
            nk = key(nx, ny, nth)
            if nk in closed:
                continue
            ng = g + step * (REVERSE_PENALTY if direction < 0 else 1.0)
            if ng >= best_g.get(nk, math.inf):
                continue
            best_g[nk] = ng
            nodes.append((nx, ny, nth, ng, idx, pts))
            heapq.heappush(open_pq, (ng + heuristic(nx, ny), counter, len(nodes) - 1))
            counter += 1
    raise SearchFailure(f"no path found after expanding {explored} nodes", explored)


def _reconstruct(nodes, idx) -> GuidancePath:
    segs = []
    cost = nodes[idx][3]
    while idx >= 0:
        segs.append(nodes[idx][5])
        idx = nodes[idx][4]
    poses = [p for seg in reversed(segs) for p in seg]
    return GuidancePath.from_poses(poses, cost=cost)


def plan_guidance(scenario: Scenario, max_nodes=200_000) -> dict:
    """Guidance trajectories for every vehicle, padded to one shared horizon."""
    raw = {}
    tu = scenario.config.time_unit
    for v in scenario.vehicles:
        if v.id in scenario.guidance:
            path = GuidancePath.from_poses(scenario.guidance[v.id])
        else:
            path = hybrid_astar(scenario.grid, v, v.start_pose, v.goal_pose, max_nodes=max_nodes)
        traj = assign_constant_speed(path, v.v_ref, tu)
        if v.v_ref * tu > v.gamma_s_plus + 1e-9:
            raise GuidanceError(
                f"vehicle {v.id}: v_ref * time_unit exceeds gamma_s_plus")
        raw[v.id] = traj
    K = max(t.K for t in raw.values())
    return {vid: t.extended(K) for vid, t in raw.items()}
