"""Post-hoc verification of a finished plan and the experiment statistics.

Everything here is recomputed from the final states with its own geometry
(car rectangles, separating-axis tests, the bicycle recursion), so it
checks the planner rather than repeating it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

CORNERS = ("fl", "fr", "rl", "rr")
CONTAINMENT_TOL = 1e-6
DYNAMICS_TOL = 1e-9


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Violation:
    kind: str  # "collision", "obstacle", "containment" or "dynamics"
    vehicles: tuple
    t: int
    detail: str
    amount: float = 0.0

    def __str__(self):
        who = ",".join(str(v) for v in self.vehicles)
        return f"{self.kind} vehicle {who} t={self.t}: {self.detail}"


# --- geometry ----------------------------------------------------------------

def rectangle(x, y, theta, length, width, rear_overhang) -> np.ndarray:
    """Corners (fl, fr, rl, rr) of a car whose reference point sits
    ``rear_overhang`` ahead of the rear bumper on the centre line."""
    c, s = math.cos(theta), math.sin(theta)
    fwd = np.array([c, s])
    left = np.array([-s, c])
    p = np.array([x, y])
    front, rear = length - rear_overhang, -rear_overhang
    hw = 0.5 * width
    return np.array([p + front * fwd + hw * left, p + front * fwd - hw * left,
                     p + rear * fwd + hw * left, p + rear * fwd - hw * left])


def _axes(poly):
    # corner order fl, fr, rl, rr: edges fl-fr and fl-rl span the rectangle
    e1 = poly[1] - poly[0]
    e2 = poly[2] - poly[0]
    out = []
    for e in (e1, e2):
        n = np.array([-e[1], e[0]])
        nn = np.hypot(*n)
        if nn > 0:
            out.append(n / nn)
    return out


def sat_gap(p, q) -> float:
    """Largest projection gap over the separating axes of two rectangles.

    Positive iff the closed rectangles are disjoint; touching gives 0.
    """
    best = -np.inf
    for ax in _axes(p) + _axes(q):
        a, b = p @ ax, q @ ax
        best = max(best, b.min() - a.max(), a.min() - b.max())
    return float(best)


def _point_segment(pt, a, b):
    d = b - a
    dd = d @ d
    s = 0.0 if dd == 0 else min(max((pt - a) @ d / dd, 0.0), 1.0)
    return float(np.hypot(*(a + s * d - pt)))


def _edges(poly):
    fl, fr, rl, rr = poly
    return ((fl, fr), (fr, rr), (rr, rl), (rl, fl))


def clearance(p, q) -> float:
    """Euclidean distance between two rectangles; 0 when they meet."""
    if sat_gap(p, q) <= 0:
        return 0.0
    d = min(_point_segment(v, a, b) for v in p for a, b in _edges(q))
    return min(d, min(_point_segment(v, a, b) for v in q for a, b in _edges(p)))


def _box_poly(b):
    x0, x1, y0, y1 = b
    return np.array([[x1, y1], [x1, y0], [x0, y1], [x0, y0]], dtype=float)


# --- checks ------------------------------------------------------------------

def _states(traj):
    return np.asarray(traj.states if hasattr(traj, "states") else traj, dtype=float)


def _common_dt(trajectories):
    dts = {round(float(t.dt), 12) for t in trajectories}
    if len(dts) > 1:
        raise MetricsError(f"trajectories use different time steps: {sorted(dts)}")
    return dts.pop() if dts else None


def _car_polys(traj, v):
    S = _states(traj)
    return [rectangle(s[0], s[1], s[2], v.length, v.width, v.rear_overhang) for s in S]


def check_collisions(trajectories, scenario) -> list:
    """Car-car and car-obstacle overlaps at every step (closed convention:
    rectangles that touch count as a collision)."""
    _common_dt(trajectories)
    polys = {tr.vehicle_id: _car_polys(tr, scenario.vehicle(tr.vehicle_id)) for tr in trajectories}
    out = []
    for ta, tb in combinations(sorted(trajectories, key=lambda t: t.vehicle_id), 2):
        pa, pb = polys[ta.vehicle_id], polys[tb.vehicle_id]
        for t in range(min(len(pa), len(pb))):
            g = sat_gap(pa[t], pb[t])
            if g <= 0:
                out.append(Violation("collision", (ta.vehicle_id, tb.vehicle_id), t,
                                     f"car boxes overlap (gap {g:.3g} m)", -g))
    for tr in sorted(trajectories, key=lambda t: t.vehicle_id):
        spu = tr.steps_per_unit
        for ob in scenario.obstacles:
            for t, p in enumerate(polys[tr.vehicle_id]):
                g = sat_gap(p, _box_poly(ob.at(t // spu)))
                if g <= 0:
                    out.append(Violation("obstacle", (tr.vehicle_id,), t,
                                         f"car box meets obstacle {ob.id} (gap {g:.3g} m)", -g))
    return out


def min_separation(trajectories, scenario) -> dict:
    """Smallest clearance over time for every vehicle pair, keyed "i,j"."""
    _common_dt(trajectories)
    polys = {tr.vehicle_id: _car_polys(tr, scenario.vehicle(tr.vehicle_id)) for tr in trajectories}
    out = {}
    for a, b in combinations(sorted(polys), 2):
        pa, pb = polys[a], polys[b]
        out[f"{a},{b}"] = min(clearance(pa[t], pb[t]) for t in range(min(len(pa), len(pb))))
    return out


def required_boxes(corridor, t, steps_per_unit):
    """Corridor boxes that must hold the car at step ``t``: the cube of its
    time unit, plus the previous one at a unit boundary."""
    K = len(corridor.cubes) - 1
    k = min(t // steps_per_unit, K)
    ks = [k]
    if t % steps_per_unit == 0 and 0 < k and t // steps_per_unit <= K:
        ks.append(k - 1)
    return [(j, corridor.cubes[j]) for j in ks]


def check_containment(istc, trajectories, scenario, tol=CONTAINMENT_TOL) -> list:
    """Corners outside their corridor cubes by more than ``tol``.

    Step 0 is the given start state and is not checked.
    """
    out = []
    for tr in sorted(trajectories, key=lambda t: t.vehicle_id):
        v = scenario.vehicle(tr.vehicle_id)
        cor = istc.corridor(tr.vehicle_id)
        for t, p in enumerate(_car_polys(tr, v)):
            if t == 0:
                continue
            for k, cb in required_boxes(cor, t, tr.steps_per_unit):
                ex = np.column_stack([cb.x_min - p[:, 0], p[:, 0] - cb.x_max,
                                      cb.y_min - p[:, 1], p[:, 1] - cb.y_max]).max(axis=1)
                worst = int(np.argmax(ex))
                if ex[worst] > tol:
                    out.append(Violation("containment", (tr.vehicle_id,), t,
                                         f"corner {CORNERS[worst]} outside cube k={k} by {ex[worst]:.3g} m",
                                         float(ex[worst])))
    return out


def dynamics_residual(traj) -> float:
    """Largest mismatch between consecutive states and one step of the
    discrete kinematic bicycle model driven by the stored controls."""
    S = _states(traj)
    U = np.asarray(traj.controls, dtype=float)
    dt, L = traj.dt, traj.wheelbase
    x, y, th, d, v, a = S[:-1].T
    pred = np.column_stack([x + v * np.cos(th) * dt, y + v * np.sin(th) * dt,
                            th + v * np.tan(d) / L * dt, d + U[:, 0] * dt,
                            v + a * dt, a + U[:, 1] * dt])
    if len(pred) == 0:
        return 0.0
    return float(np.max(np.abs(pred - S[1:])))


def path_length(traj) -> float:
    """Sum of the straight segments between consecutive positions."""
    S = _states(traj)
    if len(S) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(S[:, :2], axis=0).T)))


# --- report ------------------------------------------------------------------

@dataclass
class VehicleStats:
    vehicle_id: int
    length: float
    max_curvature: float
    max_accel: float
    min_speed: float
    max_speed: float
    pivot_deviation: float = float("nan")
    dynamics_residual: float = 0.0


@dataclass
class PlanReport:
    scenario: str
    vehicles: list
    min_separation: dict
    t_layer1: float
    t_layer2: dict  # vehicle id -> seconds
    violations: list = field(default_factory=list)
    objective: float = float("nan")
    layer1_status: str = ""

    @property
    def L_total(self) -> float:
        return float(sum(v.length for v in self.vehicles))

    @property
    def t_total(self) -> float:
        return self.t_layer1 + float(sum(self.t_layer2.values()))

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self, include_timing=True) -> dict:
        d = {
            "scenario": self.scenario,
            "passed": self.passed,
            "layer1_status": self.layer1_status,
            "objective": self.objective,
            "L_total": self.L_total,
            "vehicles": [vars(v).copy() for v in self.vehicles],
            "min_separation": self.min_separation,
            "violations": [{"kind": v.kind, "vehicles": list(v.vehicles), "t": v.t,
                            "detail": v.detail, "amount": v.amount} for v in self.violations],
        }
        if include_timing:
            d["t_layer1"] = self.t_layer1
            d["t_layer2"] = {str(k): t for k, t in self.t_layer2.items()}
            d["t_total"] = self.t_total
        return d

    def to_json(self, include_timing=True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def to_text(self, include_timing=True) -> str:
        lines = [f"scenario: {self.scenario}",
                 f"result: {'PASS' if self.passed else 'FAIL'} ({len(self.violations)} violations)",
                 f"layer 1: {self.layer1_status} objective {self.objective:.6f}"]
        if include_timing:
            lines.append(f"t_layer1 {self.t_layer1:.3f} s, t_layer2 "
                         + ", ".join(f"{k}: {t:.3f} s" for k, t in sorted(self.t_layer2.items()))
                         + f", t_total {self.t_total:.3f} s")
        lines.append(f"L_total {self.L_total:.3f} m")
        lines.append("vehicle  length_m  max_curv  max_|a|  min_v  max_v  pivot_dev  dyn_resid")
        for v in self.vehicles:
            lines.append(f"{v.vehicle_id:7d}  {v.length:8.3f}  {v.max_curvature:8.4f}  "
                         f"{v.max_accel:7.3f}  {v.min_speed:5.2f}  {v.max_speed:5.2f}  "
                         f"{v.pivot_deviation:9.3f}  {v.dynamics_residual:9.2e}")
        lines.append("min pairwise clearance (m): "
                     + (", ".join(f"{k}: {d:.3f}" for k, d in sorted(self.min_separation.items()))
                        or "none"))
        for v in self.violations:
            lines.append(f"violation: {v}")
        return "\n".join(lines) + "\n"


def summarize(istc, trajectories, timings, scenario) -> PlanReport:
    """Collision, containment and dynamics re-checks plus per-vehicle
    statistics.  ``timings`` holds ``layer1`` (s) and ``layer2`` (vehicle id
    -> s)."""
    trajectories = sorted(trajectories, key=lambda t: t.vehicle_id)
    rows = []
    violations = []
    for tr in trajectories:
        S = _states(tr)
        res = dynamics_residual(tr)
        dev = float("nan")
        if istc is not None:
            dev = float(np.sum((istc.corridor(tr.vehicle_id).pivots()
                                - istc.corridor(tr.vehicle_id).reference[:, :2]) ** 2))
        rows.append(VehicleStats(tr.vehicle_id, path_length(tr),
                                 float(np.max(np.abs(np.tan(S[:, 3]) / tr.wheelbase))),
                                 float(np.max(np.abs(S[:, 5]))),
                                 float(S[:, 4].min()), float(S[:, 4].max()), dev, res))
        if res > DYNAMICS_TOL:
            violations.append(Violation("dynamics", (tr.vehicle_id,), 0,
                                        f"recursion residual {res:.3g}", res))
    violations += check_collisions(trajectories, scenario)
    if istc is not None:
        violations += check_containment(istc, trajectories, scenario)
    sep = min_separation(trajectories, scenario) if trajectories else {}
    return PlanReport(scenario.name, rows, sep, float(timings.get("layer1", 0.0)),
                      {int(k): float(t) for k, t in timings.get("layer2", {}).items()},
                      violations,
                      float(istc.objective_value) if istc is not None else float("nan"),
                      str(istc.solve_stats.get("status", "")) if istc is not None else "")
