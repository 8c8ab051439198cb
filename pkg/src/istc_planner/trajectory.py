"""Layer 2: one bicycle-model trajectory per vehicle inside its corridor.

The decision variables are the controls (steering rate beta, jerk j) of a
single-shooting transcription.  Steering angle, acceleration, speed,
heading and position are nested cumulative sums of the controls, so the
rollout and its adjoint are vectorized prefix sums.

Internally the optimizer works on the equivalent sequences of steering
angles and accelerations, where the steering and acceleration limits are
plain box bounds.  The corridor constraints go through an augmented
Lagrangian whose inner problems are bounded nonlinear least squares
(scipy's trust-region reflective solver with exact Gauss-Newton Jacobians).
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, nnls

from .corridors import Corridor
from .scenario import PlannerConfig, VehicleSpec

CONTAINMENT_TOL = 1e-6
FEAS_TARGET = 1e-9  # corner violation (m) the outer loop aims for
KKT_TARGET = 1e-6
RHO_MAX = 1e9
DYNAMICS_TOL = 1e-9


class TrajectoryError(Exception):
    pass


class SingularSteeringError(TrajectoryError):
    pass


class NumericError(TrajectoryError):
    pass


class InfeasibleTrajectoryError(TrajectoryError):
    def __init__(self, message, max_violation=float("nan"), step=-1):
        super().__init__(message)
        self.max_violation = max_violation
        self.step = step


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    delta: float
    v: float
    a: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.delta, self.v, self.a])


@dataclass(frozen=True)
class ControlInput:
    beta: float
    j: float


def integrate_dynamics(s: VehicleState, u: ControlInput, dt: float, L: float) -> VehicleState:
    """One step of the discrete kinematic bicycle model."""
    if not (dt > 0 and L > 0):
        raise ValueError("dt and wheelbase must be positive")
    if abs(s.delta) >= math.pi / 2:
        raise SingularSteeringError(f"steering angle {s.delta:.4f} is singular")
    return VehicleState(
        s.x + s.v * math.cos(s.theta) * dt,
        s.y + s.v * math.sin(s.theta) * dt,
        s.theta + s.v * math.tan(s.delta) / L * dt,
        s.delta + u.beta * dt,
        s.v + s.a * dt,
        s.a + u.j * dt,
    )


def car_corners(s, vehicle: VehicleSpec) -> np.ndarray:
    """Corners (fl, fr, rl, rr) of the car box, rear-axle reference."""
    if isinstance(s, VehicleState):
        pose = (s.x, s.y, s.theta)
    else:
        pose = (s[0], s[1], s[2])
    return vehicle.footprint(pose)


def cube_index(t: int, steps_per_unit: int) -> int:
    return t // steps_per_unit


@dataclass
class TrajectoryNLP:
    """Cost, constraints and time mapping of one vehicle's problem."""
    vehicle: VehicleSpec
    x0: np.ndarray  # initial state (x, y, theta, delta, v, a)
    T: int
    dt: float
    steps_per_unit: int
    pivots: np.ndarray  # (K+1, 2)
    boxes: np.ndarray  # (T+1, 4) containment box per step: x_lo, x_hi, y_lo, y_hi
    w_kappa: float = 1.0
    w_beta: float = 100.0
    w_j: float = 1.0
    w_px: float = 1.0
    w_py: float = 1.0

    @property
    def step_pivots(self) -> np.ndarray:
        k = np.minimum(np.arange(self.T + 1) // self.steps_per_unit, len(self.pivots) - 1)
        return self.pivots[k]


def build_nlp(corridor: Corridor, vehicle: VehicleSpec, config: PlannerConfig, dt=None) -> TrajectoryNLP:
    dt = config.dt if dt is None else dt
    spu = int(round(config.time_unit / dt))
    if abs(spu * dt - config.time_unit) > 1e-9:
        raise ValueError("time_unit must be an integer multiple of dt")
    K = len(corridor.cubes) - 1
    T = K * spu
    b = corridor.bounds_array()
    boxes = np.empty((T + 1, 4))
    for t in range(T + 1):
        k = min(t // spu, K)
        box = b[k].copy()
        if t % spu == 0 and k > 0:
            # boundary instant: inside both neighbouring cubes
            prev = b[k - 1]
            box = np.array([max(box[0], prev[0]), min(box[1], prev[1]),
                            max(box[2], prev[2]), min(box[3], prev[3])])
        boxes[t] = box
    sx, sy, sth = vehicle.start_pose
    x0 = np.array([sx, sy, sth, vehicle.delta0, vehicle.initial_speed, vehicle.a0])
    return TrajectoryNLP(vehicle, x0, T, dt, spu, corridor.pivots(), boxes,
                         config.w_kappa, config.w_beta, config.w_j, config.w_px, config.w_py)


# --- rollout and adjoint -----------------------------------------------------

def _excl_cumsum(v, start):
    """start, start + v[0], start + v[0] + v[1], ... (len(v) + 1 entries)."""
    out = np.empty(v.size + 1)
    out[0] = start
    np.cumsum(v, out=out[1:])
    out[1:] += start
    return out


def _rsum_after(g):
    """R[s] = sum of g[r] for r > s."""
    out = np.zeros_like(g)
    out[:-1] = np.cumsum(g[::-1])[::-1][1:]
    return out


def rollout_from_profiles(nlp: TrajectoryNLP, delta, a):
    """States for given steering and acceleration sequences (t = 0..T)."""
    dt = nlp.dt
    L = nlp.vehicle.wheelbase
    x0 = nlp.x0
    if np.any(np.abs(delta) >= math.pi / 2):
        t = int(np.flatnonzero(np.abs(delta) >= math.pi / 2)[0])
        raise SingularSteeringError(f"steering angle singular at step {t}")
    v = _excl_cumsum(a[:-1] * dt, x0[4])
    tan_d = np.tan(delta)
    th = _excl_cumsum(v[:-1] * tan_d[:-1] / L * dt, x0[2])
    x = _excl_cumsum(v[:-1] * np.cos(th[:-1]) * dt, x0[0])
    y = _excl_cumsum(v[:-1] * np.sin(th[:-1]) * dt, x0[1])
    S = np.column_stack([x, y, th, delta, v, a])
    if not np.all(np.isfinite(S)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(S), axis=1))[0])
        raise NumericError(f"non-finite state at step {bad}")
    return S


def profiles_from_controls(nlp: TrajectoryNLP, controls):
    u = np.asarray(controls, dtype=float).reshape(nlp.T, 2)
    delta = _excl_cumsum(u[:, 0] * nlp.dt, nlp.x0[3])
    a = _excl_cumsum(u[:, 1] * nlp.dt, nlp.x0[5])
    return delta, a


def controls_from_profiles(nlp: TrajectoryNLP, delta, a) -> np.ndarray:
    return np.column_stack([np.diff(delta) / nlp.dt, np.diff(a) / nlp.dt])


def _corner_terms(nlp: TrajectoryNLP, S):
    """Constraint values g <= 0 for every step >= 1, corner and box side,
    plus their derivatives with respect to x, y and theta."""
    off = nlp.vehicle.body_offsets()  # (4, 2)
    th = S[1:, 2]
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]
    cx = S[1:, 0:1] + c * off[:, 0] - s * off[:, 1]
    cy = S[1:, 1:2] + s * off[:, 0] + c * off[:, 1]
    dcx = -s * off[:, 0] - c * off[:, 1]  # d cx / d theta
    dcy = c * off[:, 0] - s * off[:, 1]
    B = nlp.boxes[1:]
    g = np.stack([B[:, 0:1] - cx, cx - B[:, 1:2], B[:, 2:3] - cy, cy - B[:, 3:4]], axis=-1)
    return g, dcx, dcy  # g: (T, 4 corners, 4 sides)


def _partials(nlp: TrajectoryNLP, S):
    """Cost and direct partial derivatives of the state-dependent terms:
    (cost parts, gradient with respect to the states, shape (T+1, 6))."""
    L = nlp.vehicle.wheelbase
    piv = nlp.step_pivots
    ex = S[:, 0] - piv[:, 0]
    ey = S[:, 1] - piv[:, 1]
    tan_d = np.tan(S[:, 3])
    kappa = tan_d / L
    G = np.zeros_like(S)
    G[:, 0] = 2 * nlp.w_px * ex
    G[:, 1] = 2 * nlp.w_py * ey
    G[:, 3] = 2 * nlp.w_kappa * kappa * (1 + tan_d ** 2) / L
    parts = {
        "smooth": float(nlp.w_kappa * np.sum(kappa ** 2)),
        "pivotal": float(nlp.w_px * np.sum(ex ** 2) + nlp.w_py * np.sum(ey ** 2)),
    }
    return parts, G


def _adjoint(nlp: TrajectoryNLP, S, G):
    """Total derivatives with respect to the steering and acceleration
    sequences, given direct partials G of a state function."""
    dt = nlp.dt
    L = nlp.vehicle.wheelbase
    th, d, v = S[:, 2], S[:, 3], S[:, 4]
    Rx = _rsum_after(G[:, 0])
    Ry = _rsum_after(G[:, 1])
    Pth = G[:, 2] + dt * v * (-Rx * np.sin(th) + Ry * np.cos(th))
    Rth = _rsum_after(Pth)
    tan_d = np.tan(d)
    Pv = G[:, 4] + dt * (Rx * np.cos(th) + Ry * np.sin(th)) + dt * Rth * tan_d / L
    Pd = G[:, 3] + dt * Rth * v * (1 + tan_d ** 2) / L
    Pa = G[:, 5] + dt * _rsum_after(Pv)
    return Pd, Pa


def evaluate_cost_and_gradient(nlp: TrajectoryNLP, controls):
    """Cost of the control sequence and its gradient (flattened like
    ``controls``: beta_0, j_0, beta_1, j_1, ...)."""
    u = np.asarray(controls, dtype=float)
    if u.size != 2 * nlp.T:
        raise ValueError(f"expected {2 * nlp.T} control values, got {u.size}")
    u = u.reshape(nlp.T, 2)
    delta, a = profiles_from_controls(nlp, u)
    S = rollout_from_profiles(nlp, delta, a)
    parts, G = _partials(nlp, S)
    Pd, Pa = _adjoint(nlp, S, G)
    dt = nlp.dt
    grad = np.empty_like(u)
    # delta_s depends on beta_p for s > p, each with weight dt
    grad[:, 0] = dt * _rsum_after(Pd)[:-1] + 2 * nlp.w_beta * u[:, 0]
    grad[:, 1] = dt * _rsum_after(Pa)[:-1] + 2 * nlp.w_j * u[:, 1]
    parts["comfort"] = float(nlp.w_beta * np.sum(u[:, 0] ** 2) + nlp.w_j * np.sum(u[:, 1] ** 2))
    cost = parts["smooth"] + parts["comfort"] + parts["pivotal"]
    return cost, grad.ravel()


def _profile_objective(nlp: TrajectoryNLP, zvec):
    """Cost and gradient in the (delta_1..T, a_1..T) parametrization."""
    T, dt = nlp.T, nlp.dt
    delta = np.concatenate([[nlp.x0[3]], zvec[:T]])
    a = np.concatenate([[nlp.x0[5]], zvec[T:]])
    S = rollout_from_profiles(nlp, delta, a)
    parts, G = _partials(nlp, S)
    Pd, Pa = _adjoint(nlp, S, G)
    beta = np.diff(delta) / dt
    jerk = np.diff(a) / dt
    val = parts["smooth"] + parts["pivotal"] \
        + nlp.w_beta * beta @ beta + nlp.w_j * jerk @ jerk
    # d/d delta_t of sum beta^2: beta_{t-1} - beta_t, scaled
    gb = np.zeros(T + 1)
    gb[1:] += 2 * nlp.w_beta * beta / dt
    gb[:-1] -= 2 * nlp.w_beta * beta / dt
    gj = np.zeros(T + 1)
    gj[1:] += 2 * nlp.w_j * jerk / dt
    gj[:-1] -= 2 * nlp.w_j * jerk / dt
    grad = np.concatenate([(Pd + gb)[1:], (Pa + gj)[1:]])
    return val, grad


def _profiles(nlp: TrajectoryNLP, z):
    T = nlp.T
    return np.concatenate([[nlp.x0[3]], z[:T]]), np.concatenate([[nlp.x0[5]], z[T:]])


def _sensitivities(nlp: TrajectoryNLP, S):
    """Jacobians of x, y, theta (rows t = 0..T) with respect to z."""
    T, dt = nlp.T, nlp.dt
    L = nlp.vehicle.wheelbase
    th, d, v = S[:, 2], S[:, 3], S[:, 4]
    n = 2 * T
    Dv = np.zeros((T + 1, n))
    # v_t depends on a_1..a_{t-1}
    Dv[:, T:] = dt * np.tri(T + 1, T, -2)
    tan_d = np.tan(d)
    inc = (dt / L) * tan_d[:, None] * Dv
    inc[1:, :T] += np.diag((dt / L) * v[1:] / np.cos(d[1:]) ** 2)
    Dth = np.zeros((T + 1, n))
    np.cumsum(inc[:-1], axis=0, out=Dth[1:])
    c, s = np.cos(th)[:, None], np.sin(th)[:, None]
    Dx = np.zeros((T + 1, n))
    Dy = np.zeros((T + 1, n))
    np.cumsum(dt * (c * Dv - v[:, None] * s * Dth)[:-1], axis=0, out=Dx[1:])
    np.cumsum(dt * (s * Dv + v[:, None] * c * Dth)[:-1], axis=0, out=Dy[1:])
    return Dx, Dy, Dth


def _constraint_jacobian(nlp: TrajectoryNLP, S):
    """Values and Jacobian of all corner constraints g <= 0, flattened in
    (step, corner, side) order."""
    g, dcx, dcy = _corner_terms(nlp, S)
    Dx, Dy, Dth = _sensitivities(nlp, S)
    Jcx = Dx[1:, None, :] + dcx[:, :, None] * Dth[1:, None, :]
    Jcy = Dy[1:, None, :] + dcy[:, :, None] * Dth[1:, None, :]
    J = np.stack([-Jcx, Jcx, -Jcy, Jcy], axis=2)  # (T, 4, 4, n)
    return g.ravel(), J.reshape(-1, J.shape[-1])


def _kkt_residual(nlp: TrajectoryNLP, z, lo, hi, active_tol=1e-6):
    """Stationarity residual with least-squares multipliers for the active
    corner constraints; components at an active bound count only when
    they point into the feasible box."""
    _, grad = _profile_objective(nlp, z)
    S = rollout_from_profiles(nlp, *_profiles(nlp, z))
    g, J = _constraint_jacobian(nlp, S)
    act = np.flatnonzero(g > -active_tol)
    at_lo = z <= lo + 1e-10
    at_hi = z >= hi - 1e-10
    free = ~(at_lo | at_hi)
    r = grad.copy()
    if act.size:
        mu, _ = nnls(J[act][:, free].T, -grad[free])
        r = grad + J[act].T @ mu
    r = np.where(at_lo, np.minimum(r, 0.0), r)
    r = np.where(at_hi, np.maximum(r, 0.0), r)
    return float(np.abs(r).max())


def _residuals(nlp: TrajectoryNLP, z, lam, rho, jac=False):
    """Residual vector whose half squared norm is the augmented Lagrangian
    (up to a constant), and optionally its Jacobian.

    The containment term (max(0, lam + rho g)^2 - lam^2) / (2 rho) is the
    square of max(0, lam / sqrt(rho) + sqrt(rho) g) minus a constant.
    """
    T, dt = nlp.T, nlp.dt
    L = nlp.vehicle.wheelbase
    d, a = _profiles(nlp, z)
    S = rollout_from_profiles(nlp, d, a)
    piv = nlp.step_pivots
    w = {k: math.sqrt(2 * getattr(nlp, k)) for k in ("w_kappa", "w_beta", "w_j", "w_px", "w_py")}
    g, Jg = _constraint_jacobian(nlp, S)
    q = lam / math.sqrt(rho) + math.sqrt(rho) * g
    r = np.concatenate([
        w["w_kappa"] * np.tan(d[1:]) / L,
        w["w_beta"] * np.diff(d) / dt,
        w["w_j"] * np.diff(a) / dt,
        w["w_px"] * (S[1:, 0] - piv[1:, 0]),
        w["w_py"] * (S[1:, 1] - piv[1:, 1]),
        math.sqrt(2.0) * np.maximum(q, 0.0),
    ])
    if not jac:
        return r, g
    Dx, Dy, _ = _sensitivities(nlp, S)
    diff = (np.eye(T) - np.eye(T, k=-1)) / dt
    J = np.zeros((r.size, 2 * T))
    J[:T, :T] = np.diag(w["w_kappa"] / (L * np.cos(d[1:]) ** 2))
    J[T:2 * T, :T] = w["w_beta"] * diff
    J[2 * T:3 * T, T:] = w["w_j"] * diff
    J[3 * T:4 * T] = w["w_px"] * Dx[1:]
    J[4 * T:5 * T] = w["w_py"] * Dy[1:]
    J[5 * T:] = np.where((q > 0)[:, None], math.sqrt(2.0 * rho) * Jg, 0.0)
    return r, g, J


# --- solution container ------------------------------------------------------

@dataclass
class Trajectory:
    vehicle_id: int
    states: np.ndarray  # (T+1, 6)
    controls: np.ndarray  # (T, 2)
    dt: float
    wheelbase: float
    steps_per_unit: int
    cost: float = float("nan")
    cost_parts: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.controls.shape[0]

    @property
    def curvature(self) -> np.ndarray:
        return np.tan(self.states[:, 3]) / self.wheelbase

    @property
    def cube_k(self) -> np.ndarray:
        return np.arange(self.T + 1) // self.steps_per_unit

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "y", "theta", "delta", "v", "a", "beta", "j", "cube_k"])
        ks = self.cube_k
        for t in range(self.T + 1):
            s = self.states[t]
            u = self.controls[t] if t < self.T else (0.0, 0.0)
            w.writerow([f"{t * self.dt:.6f}"] + [repr(float(v)) for v in s]
                       + [repr(float(u[0])), repr(float(u[1])), int(ks[t])])
        return buf.getvalue()


def integrate_controls(x0, controls, dt, L) -> np.ndarray:
    """States from repeated single steps (the reference integration)."""
    s = VehicleState(*map(float, x0))
    out = [s.as_array()]
    for b, j in np.asarray(controls).reshape(-1, 2):
        s = integrate_dynamics(s, ControlInput(float(b), float(j)), dt, L)
        out.append(s.as_array())
    return np.array(out)


def containment_violations(states, boxes, vehicle: VehicleSpec, start=1):
    """Largest corner excursion beyond each step's box (<= 0 when inside)."""
    out = np.full(len(states), -np.inf)
    for t in range(start, len(states)):
        c = vehicle.footprint(states[t, :3])
        b = boxes[t]
        out[t] = max(np.max(b[0] - c[:, 0]), np.max(c[:, 0] - b[1]),
                     np.max(b[2] - c[:, 1]), np.max(c[:, 1] - b[3]))
    return out


# --- initial guess -----------------------------------------------------------

def _pivot_track(nlp: TrajectoryNLP):
    """Pivot positions interpolated in time, one per step."""
    spu = nlp.steps_per_unit
    K = len(nlp.pivots) - 1
    tt = np.arange(nlp.T + 1) / spu
    px = np.interp(tt, np.arange(K + 1), nlp.pivots[:, 0])
    py = np.interp(tt, np.arange(K + 1), nlp.pivots[:, 1])
    return np.column_stack([px, py])


def initial_guess(nlp: TrajectoryNLP):
    """Pure-pursuit rollout toward the time-interpolated pivots."""
    veh = nlp.vehicle
    L = veh.wheelbase
    dt = nlp.dt
    track = _pivot_track(nlp)
    look = nlp.steps_per_unit  # one time unit ahead
    s = nlp.x0.copy()
    delta = [s[3]]
    acc = [s[5]]
    for t in range(nlp.T):
        tgt = track[min(t + look, nlp.T)]
        dx, dy = tgt[0] - s[0], tgt[1] - s[1]
        dist = math.hypot(dx, dy)
        alpha = math.atan2(dy, dx) - s[2]
        alpha = (alpha + math.pi) % (2 * math.pi) - math.pi
        if dist > 1e-6:
            d_des = math.atan2(2 * L * math.sin(alpha), max(dist, 1.0))
        else:
            d_des = 0.0
        d_new = float(np.clip(d_des, -veh.delta_max, veh.delta_max))
        # speed that reaches the lookahead point in one unit, or stops there
        here = track[min(t + 1, nlp.T)]
        ahead = math.hypot(here[0] - s[0], here[1] - s[1]) * math.cos(
            math.atan2(here[1] - s[1], here[0] - s[0]) - s[2]) / dt
        v_des = max(0.0, 0.5 * (dist / (look * dt)) + 0.5 * ahead)
        a_new = float(np.clip((v_des - s[4]) / 1.0, -veh.a_dec_max, veh.a_acc_max))
        delta.append(d_new)
        acc.append(a_new)
        s = integrate_dynamics(VehicleState(*s), ControlInput((d_new - s[3]) / dt, (a_new - s[5]) / dt),
                               dt, L).as_array()
        # integrate_dynamics advances delta/a by the controls, so s now holds them
    return np.array(delta), np.array(acc)


# --- solver --------------------------------------------------------------------

def solve_trajectory(corridor: Corridor, vehicle: VehicleSpec, guidance=None,
                     config: PlannerConfig = None, dt=None, max_outer=40,
                     time_limit=None) -> Trajectory:
    """Optimize the vehicle's controls inside its corridor.

    ``guidance`` is accepted for interface symmetry; the pivots already
    carry the guidance intent and the initial guess follows them.
    """
    config = config or PlannerConfig()
    t0 = time.perf_counter()
    nlp = build_nlp(corridor, vehicle, config, dt)
    T = nlp.T
    if T == 0:
        raise InfeasibleTrajectoryError("empty horizon", 0.0, 0)
    if np.any(nlp.boxes[:, 1] - nlp.boxes[:, 0] < vehicle.width - 1e-9) or \
            np.any(nlp.boxes[:, 3] - nlp.boxes[:, 2] < vehicle.width - 1e-9):
        t = int(np.flatnonzero((nlp.boxes[:, 1] - nlp.boxes[:, 0] < vehicle.width - 1e-9)
                               | (nlp.boxes[:, 3] - nlp.boxes[:, 2] < vehicle.width - 1e-9))[0])
        raise InfeasibleTrajectoryError(
            f"vehicle {vehicle.id}: corridor narrower than the car at step {t}", float("inf"), t)

    d0, a0 = initial_guess(nlp)
    lo = np.concatenate([np.full(T, -vehicle.delta_max), np.full(T, -vehicle.a_dec_max)])
    hi = np.concatenate([np.full(T, vehicle.delta_max), np.full(T, vehicle.a_acc_max)])
    z = np.clip(np.concatenate([d0[1:], a0[1:]]), lo, hi)

    # augmented Lagrangian outer loop; each inner problem is a bounded
    # nonlinear least-squares solve with exact Gauss-Newton Jacobians
    lam = np.zeros(16 * T)
    rho = 10.0
    prev_viol = np.inf
    outer = 0
    inner_iters = 0
    pg = np.inf
    stalled = 0
    for outer in range(max_outer):
        cache = {}

        def fun(zz):
            r, g, J = _residuals(nlp, zz, lam, rho, jac=True)
            cache["J"] = J
            return r

        res = least_squares(fun, z, jac=lambda zz: cache["J"], bounds=(lo, hi), method="trf",
                            xtol=1e-12, ftol=1e-12, gtol=1e-10, max_nfev=200)
        z = np.clip(res.x, lo, hi)
        inner_iters += res.nfev
        _, g = _residuals(nlp, z, lam, rho)
        viol = float(max(g.max(), 0.0))
        lam = np.maximum(0.0, lam + rho * g)
        if viol <= FEAS_TARGET:
            pg = _kkt_residual(nlp, z, lo, hi)
            if pg <= KKT_TARGET:
                break
        elif viol > 0.25 * prev_viol:
            if rho >= RHO_MAX:
                stalled += 1
                # no progress at the largest penalty: the corridor is not drivable
                if stalled >= 3:
                    break
            rho = min(rho * 10.0, RHO_MAX)
        prev_viol = viol
        if time_limit is not None and time.perf_counter() - t0 > time_limit:
            break
    if not np.isfinite(pg):
        pg = _kkt_residual(nlp, z, lo, hi)
    delta, a = _profiles(nlp, z)

    controls = controls_from_profiles(nlp, delta, a)
    states = integrate_controls(nlp.x0, controls, nlp.dt, vehicle.wheelbase)
    # re-check containment on the states the caller will actually see
    viol_t = containment_violations(states, nlp.boxes, vehicle)
    worst_t = int(np.argmax(viol_t))
    worst = float(viol_t[worst_t])
    if worst > CONTAINMENT_TOL:
        raise InfeasibleTrajectoryError(
            f"vehicle {vehicle.id}: corridor containment violated by {worst:.3g} m at step {worst_t}",
            worst, worst_t)
    cost, _ = evaluate_cost_and_gradient(nlp, controls.ravel())
    parts, _ = _partials(nlp, states)
    parts["comfort"] = float(nlp.w_beta * np.sum(controls[:, 0] ** 2)
                             + nlp.w_j * np.sum(controls[:, 1] ** 2))
    parts = {k: parts[k] for k in ("smooth", "comfort", "pivotal")}
    stats = {"outer_iterations": outer + 1, "inner_iterations": inner_iters,
             "max_violation": max(worst, 0.0), "projected_gradient": pg, "rho": rho,
             "time": time.perf_counter() - t0}
    return Trajectory(vehicle.id, states, controls, nlp.dt, vehicle.wheelbase,
                      nlp.steps_per_unit, cost, parts, stats)


def trajectory_from_csv(text: str, vehicle_id: int, wheelbase: float, steps_per_unit: int) -> Trajectory:
    rows = list(csv.DictReader(io.StringIO(text)))
    states = np.array([[float(r[k]) for k in ("x", "y", "theta", "delta", "v", "a")] for r in rows])
    controls = np.array([[float(r["beta"]), float(r["j"])] for r in rows[:-1]])
    dt = float(rows[1]["t"]) - float(rows[0]["t"]) if len(rows) > 1 else 0.0
    return Trajectory(vehicle_id, states, controls, dt, wheelbase, steps_per_unit)
