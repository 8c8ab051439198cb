"""Scenario data model, validation and the JSON scenario file format."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np


class ScenarioParseError(ValueError):
    """The scenario file does not follow the schema."""


class ScenarioValidationError(ValueError):
    """The scenario parsed but violates one or more invariants."""

    def __init__(self, report):
        super().__init__("; ".join(report))
        self.report = list(report)


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    length: float
    width: float
    wheelbase: float
    start_pose: tuple
    goal_pose: tuple
    v_ref: float = 5.0
    priority: float = 1.0
    delta_max: float = 0.6
    a_acc_max: float = 3.0
    a_dec_max: float = 5.0
    gamma_s_plus: float = 10.0
    gamma_s_minus: float = 5.0
    # initial longitudinal/steering state; v0 = None means v_ref
    v0: float = None
    delta0: float = 0.0
    a0: float = 0.0

    @property
    def gamma_car(self) -> float:
        """Side of a square that holds the car box at any heading."""
        return math.hypot(self.length, self.width)

    @property
    def rear_overhang(self) -> float:
        return 0.5 * (self.length - self.wheelbase)

    @property
    def initial_speed(self) -> float:
        return self.v_ref if self.v0 is None else self.v0

    def body_offsets(self) -> np.ndarray:
        """Corner offsets (fl, fr, rl, rr) from the rear-axle centre, body frame."""
        f = self.length - self.rear_overhang
        r = -self.rear_overhang
        hw = 0.5 * self.width
        return np.array([[f, hw], [f, -hw], [r, hw], [r, -hw]])

    @property
    def reach(self) -> float:
        """Farthest body point from the reference point."""
        return float(np.max(np.hypot(*self.body_offsets().T)))

    def footprint(self, pose) -> np.ndarray:
        x, y, th = pose
        c, s = math.cos(th), math.sin(th)
        off = self.body_offsets()
        return np.column_stack([x + c * off[:, 0] - s * off[:, 1],
                                y + s * off[:, 0] + c * off[:, 1]])

    def box_extents(self, pose) -> tuple:
        """Offsets (dx_min, dx_max, dy_min, dy_max) of the axis-aligned hull
        of the car box relative to the pose position."""
        pts = self.footprint(pose)
        x, y = pose[0], pose[1]
        return (float(pts[:, 0].min() - x), float(pts[:, 0].max() - x),
                float(pts[:, 1].min() - y), float(pts[:, 1].max() - y))


@dataclass(frozen=True)
class ObstacleBox:
    id: int
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    # optional per-time-unit boxes (x_min, x_max, y_min, y_max) for moving obstacles
    per_time: tuple = None

    def at(self, k: int) -> tuple:
        if self.per_time:
            return tuple(self.per_time[min(k, len(self.per_time) - 1)])
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @property
    def is_static(self) -> bool:
        return not self.per_time


@dataclass
class OccupancyGrid:
    origin: tuple
    resolution: float
    width: int
    height: int
    occupancy: np.ndarray = None  # bool, shape (height, width), row = y index

    def __post_init__(self):
        if self.occupancy is None:
            self.occupancy = np.zeros((self.height, self.width), dtype=bool)
        self.occupancy = np.asarray(self.occupancy, dtype=bool)

    @property
    def extent(self) -> tuple:
        ox, oy = self.origin
        return (ox, ox + self.width * self.resolution, oy, oy + self.height * self.resolution)

    def cell_range(self, x_min, x_max, y_min, y_max):
        """Index ranges of cells whose squares meet the open box."""
        ox, oy = self.origin
        r = self.resolution
        ix0 = max(0, int(math.floor((x_min - ox) / r)))
        ix1 = min(self.width, int(math.ceil((x_max - ox) / r)))
        iy0 = max(0, int(math.floor((y_min - oy) / r)))
        iy1 = min(self.height, int(math.ceil((y_max - oy) / r)))
        return ix0, ix1, iy0, iy1

    def rasterize(self, obstacles) -> None:
        for ob in obstacles:
            if not ob.is_static:
                continue
            ix0, ix1, iy0, iy1 = self.cell_range(ob.x_min, ob.x_max, ob.y_min, ob.y_max)
            self.occupancy[iy0:iy1, ix0:ix1] = True

    def runs(self) -> list:
        flat = self.occupancy.ravel().astype(np.int8)
        d = np.diff(np.concatenate([[0], flat, [0]]))
        starts = np.flatnonzero(d == 1)
        ends = np.flatnonzero(d == -1)
        return [[int(s), int(e - s)] for s, e in zip(starts, ends)]

    @classmethod
    def from_runs(cls, origin, resolution, width, height, runs):
        occ = np.zeros(width * height, dtype=bool)
        for start, length in runs:
            if start < 0 or length < 0 or start + length > occ.size:
                raise ScenarioParseError(f"grid.occupied: run {[start, length]} outside the grid")
            occ[start:start + length] = True
        return cls(tuple(origin), float(resolution), int(width), int(height),
                   occ.reshape(height, width))


@dataclass(frozen=True)
class PlannerConfig:
    w_area: float = 0.5
    w_ref: float = 10.0
    w_kappa: float = 1.0
    w_beta: float = 100.0
    w_j: float = 1.0
    w_px: float = 1.0
    w_py: float = 1.0
    gamma_x_v2v: float = 0.5
    gamma_y_v2v: float = 0.5
    r_x_v2o: float = 0.3
    r_y_v2o: float = 0.3
    alpha_x: float = 1.0
    alpha_y: float = 1.0
    big_M: float = 1e4
    time_unit: float = 1.0
    dt: float = 0.1
    eps_move: float = 0.5
    node_budget: int = 50_000
    time_budget: float = 30.0
    # layer-1 rows that keep corridors drivable: the car box at each pivot
    # fits in the cubes on both sides of the boundary instant, and the
    # pivots' deviation from the guidance changes its velocity by at most
    # pivot_accel * time_unit per unit (None: the vehicle's weaker limit)
    tracking_rows: bool = True
    tracking_margin: float = 0.1
    pivot_accel: float = None

    @property
    def steps_per_unit(self) -> int:
        return int(round(self.time_unit / self.dt))


@dataclass
class Scenario:
    vehicles: list
    obstacles: list
    grid: OccupancyGrid
    config: PlannerConfig = field(default_factory=PlannerConfig)
    guidance: dict = field(default_factory=dict)  # vehicle id -> list of poses
    name: str = ""

    def vehicle(self, vid) -> VehicleSpec:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)


_VEHICLE_REQUIRED = ("id", "length", "width", "wheelbase", "start_pose", "goal_pose")
_OBSTACLE_REQUIRED = ("id", "x_min", "x_max", "y_min", "y_max")


def _number(d, key, where):
    try:
        v = d[key]
    except KeyError:
        raise ScenarioParseError(f"{where}.{key}: missing") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioParseError(f"{where}.{key}: expected a number, got {v!r}")
    return v


def _pose(d, key, where):
    v = d.get(key)
    if (not isinstance(v, (list, tuple)) or len(v) != 3
            or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in v)):
        raise ScenarioParseError(f"{where}.{key}: expected [x, y, theta]")
    return tuple(float(a) for a in v)


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ScenarioParseError(f"{where}: expected an object")
    extra = set(d) - set(allowed)
    if extra:
        raise ScenarioParseError(f"{where}: unknown field(s) {sorted(extra)}")


def scenario_from_dict(data: dict, validate=True) -> Scenario:
    _check_keys(data, ("name", "config", "grid", "vehicles", "obstacles", "guidance"), "scenario")
    cfg_fields = {f.name: f for f in fields(PlannerConfig)}
    cfg_raw = data.get("config", {})
    _check_keys(cfg_raw, cfg_fields, "config")
    cfg = {}
    for k in cfg_raw:
        ftype = cfg_fields[k].type
        if ftype in ("bool", bool):
            if not isinstance(cfg_raw[k], bool):
                raise ScenarioParseError(f"config.{k}: expected true or false")
            cfg[k] = cfg_raw[k]
            continue
        if cfg_raw[k] is None and cfg_fields[k].default is None:
            cfg[k] = None
            continue
        val = _number(cfg_raw, k, "config")
        cfg[k] = int(val) if ftype in ("int", int) else float(val)
    config = PlannerConfig(**cfg)

    if "grid" not in data:
        raise ScenarioParseError("grid: missing")
    g = data["grid"]
    _check_keys(g, ("origin", "resolution", "width", "height", "occupied"), "grid")
    origin = g.get("origin")
    if not isinstance(origin, (list, tuple)) or len(origin) != 2:
        raise ScenarioParseError("grid.origin: expected [x, y]")
    for key in ("width", "height"):
        if not isinstance(g.get(key), int) or isinstance(g.get(key), bool):
            raise ScenarioParseError(f"grid.{key}: expected an integer")
    grid = OccupancyGrid.from_runs(origin, _number(g, "resolution", "grid"), g["width"],
                                   g["height"], g.get("occupied", []))

    vfields = {f.name for f in fields(VehicleSpec)}
    vehicles = []
    raw_vehicles = data.get("vehicles")
    if not isinstance(raw_vehicles, list):
        raise ScenarioParseError("vehicles: expected a list")
    for i, v in enumerate(raw_vehicles):
        where = f"vehicles[{i}]"
        _check_keys(v, vfields, where)
        for key in _VEHICLE_REQUIRED:
            if key not in v:
                raise ScenarioParseError(f"{where}.{key}: missing")
        kw = {}
        for key in v:
            if key in ("start_pose", "goal_pose"):
                kw[key] = _pose(v, key, where)
            elif key == "id":
                if not isinstance(v["id"], int) or isinstance(v["id"], bool):
                    raise ScenarioParseError(f"{where}.id: expected an integer")
                kw[key] = v["id"]
            elif key == "v0" and v[key] is None:
                kw[key] = None
            else:
                kw[key] = float(_number(v, key, where))
        vehicles.append(VehicleSpec(**kw))

    obstacles = []
    for i, o in enumerate(data.get("obstacles", [])):
        where = f"obstacles[{i}]"
        _check_keys(o, _OBSTACLE_REQUIRED + ("per_time",), where)
        kw = {k: float(_number(o, k, where)) for k in _OBSTACLE_REQUIRED[1:]}
        pt = o.get("per_time")
        if pt is not None:
            if not isinstance(pt, list) or not all(isinstance(b, list) and len(b) == 4 for b in pt):
                raise ScenarioParseError(f"{where}.per_time: expected a list of [x_min, x_max, y_min, y_max]")
            pt = tuple(tuple(float(a) for a in b) for b in pt)
        obstacles.append(ObstacleBox(id=int(_number(o, "id", where)), per_time=pt, **kw))

    guidance = {}
    for i, gd in enumerate(data.get("guidance", [])):
        where = f"guidance[{i}]"
        _check_keys(gd, ("vehicle", "poses"), where)
        poses = gd.get("poses")
        if not isinstance(poses, list) or not poses:
            raise ScenarioParseError(f"{where}.poses: expected a non-empty list")
        guidance[int(_number(gd, "vehicle", where))] = [
            _pose({"p": p}, "p", f"{where}.poses[{j}]") for j, p in enumerate(poses)]

    s = Scenario(vehicles, obstacles, grid, config, guidance, str(data.get("name", "")))
    if validate:
        report = validate_scenario(s)
        if report:
            raise ScenarioValidationError(report)
    return s


def parse_scenario(text: str, validate=True) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"not valid JSON: {exc}") from None
    return scenario_from_dict(data, validate=validate)


def load_scenario(path, validate=True) -> Scenario:
    with open(path) as fh:
        return parse_scenario(fh.read(), validate=validate)


def scenario_to_dict(s: Scenario) -> dict:
    out = {}
    if s.name:
        out["name"] = s.name
    out["config"] = asdict(s.config)
    g = s.grid
    out["grid"] = {"origin": list(g.origin), "resolution": g.resolution, "width": g.width,
                   "height": g.height, "occupied": g.runs()}
    vs = []
    for v in s.vehicles:
        d = asdict(v)
        d["start_pose"] = list(v.start_pose)
        d["goal_pose"] = list(v.goal_pose)
        vs.append(d)
    out["vehicles"] = vs
    obs = []
    for o in s.obstacles:
        d = {"id": o.id, "x_min": o.x_min, "x_max": o.x_max, "y_min": o.y_min, "y_max": o.y_max}
        if o.per_time:
            d["per_time"] = [list(b) for b in o.per_time]
        obs.append(d)
    out["obstacles"] = obs
    if s.guidance:
        out["guidance"] = [{"vehicle": vid, "poses": [list(p) for p in poses]}
                           for vid, poses in sorted(s.guidance.items())]
    return out


def serialize_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=1)


def footprint_hits_grid(grid: OccupancyGrid, corners: np.ndarray) -> bool:
    """Exact test: does the convex quadrilateral overlap any occupied cell?"""
    xs, ys = corners[:, 0], corners[:, 1]
    ix0, ix1, iy0, iy1 = grid.cell_range(xs.min(), xs.max(), ys.min(), ys.max())
    x_lo, x_hi, y_lo, y_hi = grid.extent
    if xs.min() < x_lo or xs.max() > x_hi or ys.min() < y_lo or ys.max() > y_hi:
        return True
    sub = grid.occupancy[iy0:iy1, ix0:ix1]
    if not sub.any():
        return False
    iy, ix = np.nonzero(sub)
    r = grid.resolution
    cx0 = grid.origin[0] + (ix + ix0) * r
    cy0 = grid.origin[1] + (iy + iy0) * r
    # separating axes: the two cell axes are covered by the cell_range
    # prefilter only for the box hull, so test all four axes explicitly.
    hit = np.ones(cx0.size, dtype=bool)
    hit &= (cx0 < xs.max()) & (cx0 + r > xs.min()) & (cy0 < ys.max()) & (cy0 + r > ys.min())
    for i in range(4):
        e = corners[(i + 1) % 4] - corners[i]
        nrm = np.array([-e[1], e[0]])
        proj_poly = corners @ nrm
        cell_pts = np.stack([
            cx0 * nrm[0] + cy0 * nrm[1],
            (cx0 + r) * nrm[0] + cy0 * nrm[1],
            cx0 * nrm[0] + (cy0 + r) * nrm[1],
            (cx0 + r) * nrm[0] + (cy0 + r) * nrm[1]])
        hit &= (cell_pts.min(axis=0) < proj_poly.max()) & (cell_pts.max(axis=0) > proj_poly.min())
    return bool(hit.any())


def validate_scenario(s: Scenario) -> list:
    """List of violated invariants; empty iff the scenario is runnable."""
    rep = []
    if not s.vehicles:
        rep.append("no vehicles")
    ids = [v.id for v in s.vehicles]
    if len(set(ids)) != len(ids):
        rep.append("vehicle ids not unique")
    for v in s.vehicles:
        tag = f"vehicle {v.id}"
        if not v.length > 0:
            rep.append(f"{tag}: length must be > 0")
        if not v.width > 0:
            rep.append(f"{tag}: width must be > 0")
        if not 0 < v.wheelbase < v.length:
            rep.append(f"{tag}: wheelbase must satisfy 0 < wheelbase < length")
        if not v.priority >= 0:
            rep.append(f"{tag}: priority must be >= 0")
        if not 0 < v.delta_max < math.pi / 2:
            rep.append(f"{tag}: delta_max must lie in (0, pi/2)")
        if not v.a_acc_max > 0:
            rep.append(f"{tag}: a_acc_max must be > 0")
        if not v.a_dec_max > 0:
            rep.append(f"{tag}: a_dec_max must be > 0")
        if not v.gamma_s_plus > 0:
            rep.append(f"{tag}: gamma_s_plus must be > 0")
        if not v.gamma_s_minus >= 0:
            rep.append(f"{tag}: gamma_s_minus must be >= 0")
        if not v.v_ref > 0:
            rep.append(f"{tag}: v_ref must be > 0")
        if abs(v.delta0) >= v.delta_max + 1e-12:
            rep.append(f"{tag}: delta0 outside steering range")
        if not -v.a_dec_max <= v.a0 <= v.a_acc_max:
            rep.append(f"{tag}: a0 outside acceleration range")
    c = s.config
    for name in ("w_area", "w_ref", "w_kappa", "w_beta", "w_j", "w_px", "w_py"):
        if not getattr(c, name) >= 0:
            rep.append(f"config: weight {name} < 0")
    for name in ("gamma_x_v2v", "gamma_y_v2v", "r_x_v2o", "r_y_v2o", "eps_move",
                 "tracking_margin"):
        if not getattr(c, name) >= 0:
            rep.append(f"config: threshold {name} < 0")
    if not (c.alpha_x >= 1 and c.alpha_y >= 1):
        rep.append("config: relaxation factor < 1")
    if not c.big_M > 0:
        rep.append("config: big_M must be > 0")
    if not c.time_unit > 0:
        rep.append("config: time_unit must be > 0")
    if not c.dt > 0:
        rep.append("config: dt must be > 0")
    elif c.time_unit > 0 and abs(c.time_unit / c.dt - round(c.time_unit / c.dt)) > 1e-9:
        rep.append("config: time_unit is not an integer multiple of dt")
    if not (c.node_budget > 0 and c.time_budget > 0):
        rep.append("config: solver budgets must be > 0")
    if c.pivot_accel is not None and not c.pivot_accel > 0:
        rep.append("config: pivot_accel must be > 0")

    g = s.grid
    if not g.resolution > 0:
        rep.append("grid: resolution must be > 0")
    if g.occupancy.shape != (g.height, g.width):
        rep.append("grid: occupancy shape does not match width/height")
    elif g.resolution > 0:
        for ob in s.obstacles:
            if not (ob.x_min < ob.x_max and ob.y_min < ob.y_max):
                rep.append(f"obstacle {ob.id}: degenerate box")
                continue
            if ob.is_static:
                ix0, ix1, iy0, iy1 = g.cell_range(ob.x_min, ob.x_max, ob.y_min, ob.y_max)
                if not g.occupancy[iy0:iy1, ix0:ix1].all():
                    rep.append(f"obstacle {ob.id}: box not rasterized in grid")
    for ob in s.obstacles:
        for b in ob.per_time or ():
            if not (b[0] < b[1] and b[2] < b[3]):
                rep.append(f"obstacle {ob.id}: degenerate per-time box")
                break

    shape_ok = all(v.length > 0 and v.width > 0 and 0 < v.wheelbase < v.length for v in s.vehicles)
    if shape_ok and g.resolution > 0 and g.occupancy.shape == (g.height, g.width):
        for v in s.vehicles:
            if footprint_hits_grid(g, v.footprint(v.start_pose)):
                rep.append(f"vehicle {v.id}: start pose collides with the grid")
        for i, vi in enumerate(s.vehicles):
            for vj in s.vehicles[i + 1:]:
                if not start_boxes_separable(vi, vj, c):
                    rep.append(f"vehicles {vi.id},{vj.id}: start separation below threshold")
    for vid in s.guidance:
        if vid not in ids:
            rep.append(f"guidance for unknown vehicle {vid}")
    return rep


def start_boxes_separable(vi: VehicleSpec, vj: VehicleSpec, c: PlannerConfig) -> bool:
    """Whether start cubes holding both car boxes can be separated by the
    inter-vehicle thresholds along some axis."""
    ei = vi.box_extents(vi.start_pose)
    ej = vj.box_extents(vj.start_pose)
    xi = (vi.start_pose[0] + ei[0], vi.start_pose[0] + ei[1])
    yi = (vi.start_pose[1] + ei[2], vi.start_pose[1] + ei[3])
    xj = (vj.start_pose[0] + ej[0], vj.start_pose[0] + ej[1])
    yj = (vj.start_pose[1] + ej[2], vj.start_pose[1] + ej[3])
    gx = max(xj[0] - xi[1], xi[0] - xj[1])
    gy = max(yj[0] - yi[1], yi[0] - yj[1])
    return gx >= c.gamma_x_v2v or gy >= c.gamma_y_v2v
