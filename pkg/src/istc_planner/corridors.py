"""Layer 1: interactive spatio-temporal corridors from one MIQP.

Every vehicle ``i`` gets one axis-aligned cube per time unit ``k``,
parameterized by a pivot ``(px, py)`` and four non-negative scales
``(x1, x2, y1, y2)``; the cube spans ``[px - x1, px + x2] x [py - y1, py + y2]``.
Cubes of different vehicles at the same ``k`` are kept apart with big-M
disjunctions, as are cubes and obstacle boxes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .miqp import MIQPProblem, MIQPTimeout, solve_miqp
from .qp import QPError, QPProblem, solve_qp
from .scenario import ObstacleBox, Scenario, VehicleSpec, start_boxes_separable

CHECK_TOL = 1e-6
NV = 6  # px, py, x1, x2, y1, y2


class ISTCError(Exception):
    pass


class DegenerateHorizonError(ISTCError):
    pass


class ISTCInfeasibleError(ISTCError):
    def __init__(self, message, family=None, pair=None):
        super().__init__(message)
        self.family = family
        self.pair = pair


class ISTCTimeoutError(ISTCError):
    pass


@dataclass(frozen=True)
class CorridorCube:
    k: int
    px: float
    py: float
    x1: float
    x2: float
    y1: float
    y2: float

    @property
    def x_min(self):
        return self.px - self.x1

    @property
    def x_max(self):
        return self.px + self.x2

    @property
    def y_min(self):
        return self.py - self.y1

    @property
    def y_max(self):
        return self.py + self.y2

    @property
    def bounds(self):
        return (self.x_min, self.x_max, self.y_min, self.y_max)

    @classmethod
    def from_bounds(cls, k, x_min, x_max, y_min, y_max, px, py):
        return cls(k, px, py, px - x_min, x_max - px, py - y_min, y_max - py)


@dataclass
class Corridor:
    vehicle_id: int
    cubes: list
    reference: np.ndarray  # (K+1, 3) guidance samples the corridor was built from

    def bounds_array(self) -> np.ndarray:
        return np.array([c.bounds for c in self.cubes])

    def pivots(self) -> np.ndarray:
        return np.array([(c.px, c.py) for c in self.cubes])


@dataclass
class ISTCSet:
    corridors: list
    K: int
    objective_value: float = float("nan")
    solve_stats: dict = field(default_factory=dict)

    def corridor(self, vid) -> Corridor:
        for c in self.corridors:
            if c.vehicle_id == vid:
                return c
        raise KeyError(vid)


@dataclass
class ISTCModel:
    """An assembled MIQP plus the bookkeeping needed to read it back."""
    problem: MIQPProblem
    K: int
    vehicle_ids: list
    row_labels: list  # (family, description) per row
    pair_groups: dict  # (i, j, k) -> 4 binary indices
    obstacle_groups: dict  # (i, obstacle id, k) -> 4 binary indices
    references: dict
    big_rows: dict = field(default_factory=dict)  # binary index -> its big-M row

    @property
    def n_continuous(self) -> int:
        return NV * len(self.vehicle_ids) * (self.K + 1)

    @property
    def n_binary(self) -> int:
        return self.problem.binary_indices.size


def _headings(theta):
    return np.atleast_1d(np.asarray(theta, dtype=float))


def drive_range(v: VehicleSpec, theta, cfg):
    """Per-axis (back, forward) reach of the pivot within one time unit.

    Forward motion along the reference heading may cover ``alpha * gamma_s+``
    projected on each axis, backward motion ``alpha * gamma_s-``; each is
    floored at ``eps_move``.  ``theta`` may list several headings (those at
    both ends of the unit); the reach is then the largest over them.
    """
    out = []
    for axis, alpha in ((0, cfg.alpha_x), (1, cfg.alpha_y)):
        lo = hi = cfg.eps_move
        for th in _headings(theta):
            comp = math.cos(th) if axis == 0 else math.sin(th)
            a = abs(comp)
            if comp >= 0:
                lo = max(lo, alpha * v.gamma_s_minus * a)
                hi = max(hi, alpha * v.gamma_s_plus * a)
            else:
                lo = max(lo, alpha * v.gamma_s_plus * a)
                hi = max(hi, alpha * v.gamma_s_minus * a)
        out.append((lo, hi))
    return out


def pivot_step(v: VehicleSpec, theta, cfg):
    """Bounds on |dx|, |dy| between consecutive pivots."""
    th = _headings(theta)
    return (max(float(np.max(np.abs(v.gamma_s_plus * np.cos(th)))), cfg.eps_move),
            max(float(np.max(np.abs(v.gamma_s_plus * np.sin(th)))), cfg.eps_move))


def unit_headings(ref, k):
    """Reference headings at both ends of the unit leading to cube k."""
    return ref[k - 1, 2], ref[k, 2]


def pivot_accel(v: VehicleSpec, cfg) -> float:
    """Per-axis bound on the second difference of the pivot deviation."""
    a = cfg.pivot_accel if cfg.pivot_accel is not None else min(v.a_acc_max, v.a_dec_max)
    return a * cfg.time_unit ** 2


def tracking_terms(v: VehicleSpec, ref, cfg):
    """Affine pieces of the tracking rows.

    Yields ``(k, coefs, const)`` where ``coefs`` maps pivot indices (k-2,
    k-1, k) to weights and the constrained quantity is, per axis,
    ``sum(w * p[j]) + const`` with |.| <= pivot_accel.  The start position
    stands in for pivot 0 and the initial velocity gap to the guidance sets
    the deviation velocity before k = 1.
    """
    start = np.array(v.start_pose[:2])
    dev0 = start - ref[0, :2]
    u0 = np.array([math.cos(v.start_pose[2]), math.sin(v.start_pose[2])])
    vel0 = (v.initial_speed - v.v_ref) * cfg.time_unit * u0
    nk = len(ref)
    for k in range(1, nk):
        if k == 1:
            yield k, {1: 1.0}, -ref[1, :2] - dev0 - vel0
        elif k == 2:
            yield k, {2: 1.0, 1: -2.0}, -ref[2, :2] + 2 * ref[1, :2] + dev0
        else:
            yield k, {k: 1.0, k - 1: -2.0, k - 2: 1.0}, \
                -ref[k, :2] + 2 * ref[k - 1, :2] - ref[k - 2, :2]


def _tracking_rows(rows, v, ref, cfg, nk, var, xmin, xmax, ymin, ymax):
    m = cfg.tracking_margin
    PX, PY = 0, 1
    for k in range(1, nk):
        tag = f"vehicle {v.id} k={k}"
        # car box at pivot k (reference heading, plus margin) in cubes k-1, k
        e = v.box_extents((0.0, 0.0, ref[k, 2]))
        for j in (k - 1, k):
            rows.add(xmin(j) + [(var(k, PX), -1)], e[0] - m, "window", tag)
            rows.add(xmax(j, -1) + [(var(k, PX), 1)], -e[1] - m, "window", tag)
            rows.add(ymin(j) + [(var(k, PY), -1)], e[2] - m, "window", tag)
            rows.add(ymax(j, -1) + [(var(k, PY), 1)], -e[3] - m, "window", tag)
    A = pivot_accel(v, cfg)
    for k, coefs, const in tracking_terms(v, ref, cfg):
        tag = f"vehicle {v.id} k={k}"
        for axis, f in ((0, PX), (1, PY)):
            for sign in (1, -1):
                rows.add([(var(j, f), sign * w) for j, w in coefs.items()],
                         A - sign * const[axis], "pivot-accel", tag)


class _Rows:
    def __init__(self):
        self.r, self.c, self.v = [], [], []
        self.rhs = []
        self.labels = []

    def add(self, coefs, rhs, family, desc):
        i = len(self.rhs)
        for col, val in coefs:
            self.r.append(i)
            self.c.append(col)
            self.v.append(val)
        self.rhs.append(rhs)
        self.labels.append((family, desc))

    def matrix(self, n):
        return sp.csr_matrix((self.v, (self.r, self.c)), shape=(len(self.rhs), n))


def build_miqp(s: Scenario, guidance: dict) -> ISTCModel:
    cfg = s.config
    vehicles = s.vehicles
    V = len(vehicles)
    Ks = {guidance[v.id].K for v in vehicles}
    if len(Ks) != 1:
        raise ISTCError("guidance trajectories must share one horizon")
    K = Ks.pop()
    if K < 1:
        raise DegenerateHorizonError("horizon K must be at least 1")
    for a, b in combinations(vehicles, 2):
        if not start_boxes_separable(a, b, cfg):
            raise ISTCInfeasibleError(
                f"start boxes of vehicles {a.id} and {b.id} cannot be separated",
                family="start", pair=(a.id, b.id))

    nk = K + 1
    n_cont = NV * V * nk
    obstacles = s.obstacles
    n_bin = 4 * nk * (V * (V - 1) // 2) + 4 * nk * V * len(obstacles)
    n = n_cont + n_bin

    def var(a, k, f):
        return NV * (a * nk + k) + f

    PX, PY, X1, X2, Y1, Y2 = range(NV)
    x_lo, x_hi, y_lo, y_hi = s.grid.extent

    lb = np.zeros(n)
    ub = np.ones(n)
    Qd = np.zeros(n)
    c = np.zeros(n)
    const = 0.0
    for a, v in enumerate(vehicles):
        ref = guidance[v.id].samples
        eta = v.priority
        h = v.reach
        sx, sy = v.start_pose[0], v.start_pose[1]
        # reachable pivot box, grown by the per-unit step limit
        (bx, fx), (by, fy) = drive_range(v, v.start_pose[2], cfg)
        plo = np.array([sx - bx - h, sy - by - h])
        phi = np.array([sx + fx + h, sy + fy + h])
        for k in range(nk):
            if k > 0:
                th = unit_headings(ref, k)
                (bx, fx), (by, fy) = drive_range(v, th, cfg)
                step = np.array(pivot_step(v, th, cfg))
                plo = plo - step
                phi = phi + step
                s1 = step + np.array([bx, by]) + h
                s2 = step + np.array([fx, fy]) + h
            else:
                s1 = phi - np.array([sx - bx - h, sy - by - h])
                s2 = np.array([sx + fx + h, sy + fy + h]) - plo
            plo = np.maximum(plo, [x_lo, y_lo])
            phi = np.minimum(phi, [x_hi, y_hi])
            lb[var(a, k, PX)], ub[var(a, k, PX)] = plo[0], phi[0]
            lb[var(a, k, PY)], ub[var(a, k, PY)] = plo[1], phi[1]
            caps = {X1: min(s1[0], phi[0] - x_lo), X2: min(s2[0], x_hi - plo[0]),
                    Y1: min(s1[1], phi[1] - y_lo), Y2: min(s2[1], y_hi - plo[1])}
            for f, cap in caps.items():
                lb[var(a, k, f)] = 0.0
                ub[var(a, k, f)] = max(cap, 0.0)
                c[var(a, k, f)] = -eta * cfg.w_area
            Qd[var(a, k, PX)] = 2 * eta * cfg.w_ref
            Qd[var(a, k, PY)] = 2 * eta * cfg.w_ref
            c[var(a, k, PX)] = -2 * eta * cfg.w_ref * ref[k, 0]
            c[var(a, k, PY)] = -2 * eta * cfg.w_ref * ref[k, 1]
            const += eta * cfg.w_ref * (ref[k, 0] ** 2 + ref[k, 1] ** 2)

    rows = _Rows()

    def xmin(a, k, sign=1.0):
        return [(var(a, k, PX), sign), (var(a, k, X1), -sign)]

    def xmax(a, k, sign=1.0):
        return [(var(a, k, PX), sign), (var(a, k, X2), sign)]

    def ymin(a, k, sign=1.0):
        return [(var(a, k, PY), sign), (var(a, k, Y1), -sign)]

    def ymax(a, k, sign=1.0):
        return [(var(a, k, PY), sign), (var(a, k, Y2), sign)]

    for a, v in enumerate(vehicles):
        ref = guidance[v.id].samples
        gc = v.gamma_car
        h = v.reach
        for k in range(nk):
            tag = f"vehicle {v.id} k={k}"
            # cube holds the car box at any heading
            rows.add([(var(a, k, X1), -1), (var(a, k, X2), -1)], -gc, "size", tag)
            rows.add([(var(a, k, Y1), -1), (var(a, k, Y2), -1)], -gc, "size", tag)
            # stay on the map
            rows.add(xmin(a, k, -1), -x_lo, "map", tag)
            rows.add(xmax(a, k), x_hi, "map", tag)
            rows.add(ymin(a, k, -1), -y_lo, "map", tag)
            rows.add(ymax(a, k), y_hi, "map", tag)
            # driving range relative to the previous pivot (start pose at k=0)
            th = unit_headings(ref, k) if k > 0 else v.start_pose[2]
            (bx, fx), (by, fy) = drive_range(v, th, cfg)
            if k == 0:
                sx, sy = v.start_pose[0], v.start_pose[1]
                rows.add(xmin(a, 0, -1), -(sx - bx - h), "drive", tag)
                rows.add(xmax(a, 0), sx + fx + h, "drive", tag)
                rows.add(ymin(a, 0, -1), -(sy - by - h), "drive", tag)
                rows.add(ymax(a, 0), sy + fy + h, "drive", tag)
            else:
                pxp, pyp = var(a, k - 1, PX), var(a, k - 1, PY)
                rows.add(xmin(a, k, -1) + [(pxp, 1)], bx + h, "drive", tag)
                rows.add(xmax(a, k) + [(pxp, -1)], fx + h, "drive", tag)
                rows.add(ymin(a, k, -1) + [(pyp, 1)], by + h, "drive", tag)
                rows.add(ymax(a, k) + [(pyp, -1)], fy + h, "drive", tag)
                # consecutive cubes overlap by at least one car square per axis
                rows.add(xmax(a, k, -1) + xmin(a, k - 1), -gc, "overlap", tag)
                rows.add(xmax(a, k - 1, -1) + xmin(a, k), -gc, "overlap", tag)
                rows.add(ymax(a, k, -1) + ymin(a, k - 1), -gc, "overlap", tag)
                rows.add(ymax(a, k - 1, -1) + ymin(a, k), -gc, "overlap", tag)
                # pivot displacement limited by the top speed
                sxm, sym = pivot_step(v, th, cfg)
                for sign in (1, -1):
                    rows.add([(var(a, k, PX), sign), (pxp, -sign)], sxm, "pivot-step", tag)
                    rows.add([(var(a, k, PY), sign), (pyp, -sign)], sym, "pivot-step", tag)
        if cfg.tracking_rows:
            _tracking_rows(rows, v, ref, cfg, nk, lambda k, f: var(a, k, f),
                           lambda k, sg=1.0: xmin(a, k, sg), lambda k, sg=1.0: xmax(a, k, sg),
                           lambda k, sg=1.0: ymin(a, k, sg), lambda k, sg=1.0: ymax(a, k, sg))
        # start cube holds the initial car box
        d = v.box_extents(v.start_pose)
        sx, sy = v.start_pose[0], v.start_pose[1]
        tag = f"vehicle {v.id} k=0"
        rows.add(xmin(a, 0), sx + d[0], "start", tag)
        rows.add(xmax(a, 0, -1), -(sx + d[1]), "start", tag)
        rows.add(ymin(a, 0), sy + d[2], "start", tag)
        rows.add(ymax(a, 0, -1), -(sy + d[3]), "start", tag)

    big = []  # (row, binary column) of every disjunctive row

    def add_big(coefs, d, rhs, family, tag):
        big.append((len(rows.rhs), d))
        rows.add(coefs, rhs, family, tag)

    gx, gy = cfg.gamma_x_v2v, cfg.gamma_y_v2v
    nb = n_cont
    pair_groups = {}
    for (a, va), (b, vb) in combinations(enumerate(vehicles), 2):
        for k in range(nk):
            d = list(range(nb, nb + 4))
            nb += 4
            pair_groups[(va.id, vb.id, k)] = d
            tag = f"vehicles {va.id},{vb.id} k={k}"
            # x_min^i - x_max^j + M d >= gamma  <=>  x_max^j - x_min^i - M d <= -gamma
            add_big(xmax(b, k) + xmin(a, k, -1), d[0], -gx, "vehicle-separation", tag)
            add_big(xmax(a, k) + xmin(b, k, -1), d[1], -gx, "vehicle-separation", tag)
            add_big(ymax(b, k) + ymin(a, k, -1), d[2], -gy, "vehicle-separation", tag)
            add_big(ymax(a, k) + ymin(b, k, -1), d[3], -gy, "vehicle-separation", tag)
            rows.add([(j, 1) for j in d], 3, "vehicle-separation", tag)

    rx, ry = cfg.r_x_v2o, cfg.r_y_v2o
    obstacle_groups = {}
    for a, v in enumerate(vehicles):
        for ob in obstacles:
            for k in range(nk):
                d = list(range(nb, nb + 4))
                nb += 4
                obstacle_groups[(v.id, ob.id, k)] = d
                ox0, ox1, oy0, oy1 = ob.at(k)
                tag = f"vehicle {v.id} obstacle {ob.id} k={k}"
                add_big(xmin(a, k, -1), d[0], -rx - ox1, "obstacle-separation", tag)
                add_big(xmax(a, k), d[1], ox0 - rx, "obstacle-separation", tag)
                add_big(ymin(a, k, -1), d[2], -ry - oy1, "obstacle-separation", tag)
                add_big(ymax(a, k), d[3], oy0 - ry, "obstacle-separation", tag)
                rows.add([(j, 1) for j in d], 3, "obstacle-separation", tag)
    assert nb == n

    # Valid inequalities.  A cube has positive width, so it cannot lie on both
    # sides of another box along one axis; and consecutive cubes overlap by a
    # car square, so the order along an axis cannot flip in one time unit.
    def cut(i, j, tag):
        rows.add([(i, -1), (j, -1)], -1, "cut", tag)

    for (ia, ib, k), d in pair_groups.items():
        tag = f"vehicles {ia},{ib} k={k}"
        cut(d[0], d[1], tag)
        cut(d[2], d[3], tag)
        if k > 0:
            dp = pair_groups[(ia, ib, k - 1)]
            for lo, hi in ((0, 1), (2, 3)):
                cut(dp[lo], d[hi], tag)
                cut(dp[hi], d[lo], tag)
    for (vid, oid, k), d in obstacle_groups.items():
        tag = f"vehicle {vid} obstacle {oid} k={k}"
        cut(d[0], d[1], tag)
        cut(d[2], d[3], tag)
        if k == 0:
            continue
        gc = s.vehicle(vid).gamma_car
        ob = next(o for o in obstacles if o.id == oid)
        prev, cur = ob.at(k - 1), ob.at(k)
        dp = obstacle_groups[(vid, oid, k - 1)]
        for axis, r in ((0, rx), (2, ry)):
            lo0, hi0 = prev[axis], prev[axis + 1]
            lo1, hi1 = cur[axis], cur[axis + 1]
            if hi0 + r + gc > lo1 - r:  # beyond at k-1, before at k
                cut(dp[axis], d[axis + 1], tag)
            if hi1 + r > lo0 - r - gc:  # before at k-1, beyond at k
                cut(dp[axis + 1], d[axis], tag)

    # Each disjunctive row gets the smallest M that still relaxes it over the
    # variable box; rows that can never hold force their indicator to 1.
    A0 = rows.matrix(n)
    rhs = np.array(rows.rhs)
    pos = A0.maximum(0)
    neg = A0.minimum(0)
    sup = pos @ ub + neg @ lb
    inf = pos @ lb + neg @ ub
    for r, d in big:
        slack = sup[r] - rhs[r]
        m_row = min(cfg.big_M, max(slack, 0.0))
        if inf[r] > rhs[r] + 1e-9:
            lb[d] = 1.0
        rows.r.append(r)
        rows.c.append(d)
        rows.v.append(-m_row)
    A = rows.matrix(n)
    base = QPProblem(np.diag(Qd), c, A, np.array(rows.rhs), lb, ub, constant=const)
    # disjunctions in time order, vehicle pairs before obstacles
    keyed = [(key[-1], 0, g) for key, g in pair_groups.items()] + \
        [(key[-1], 1, g) for key, g in obstacle_groups.items()]
    keyed.sort(key=lambda e: (e[0], e[1]))
    problem = MIQPProblem(base, np.arange(n_cont, n), [g for _, _, g in keyed])
    refs = {v.id: guidance[v.id].samples.copy() for v in vehicles}
    return ISTCModel(problem, K, [v.id for v in vehicles], rows.labels, pair_groups,
                     obstacle_groups, refs, {d: r for r, d in big})


def objective_of(istc: ISTCSet, s: Scenario) -> float:
    """Priority-weighted sum of (-area + reference deviation) over all cubes."""
    cfg = s.config
    total = 0.0
    for cor in istc.corridors:
        v = s.vehicle(cor.vehicle_id)
        area = sum(c.x1 + c.x2 + c.y1 + c.y2 for c in cor.cubes)
        dev = sum((c.px - cor.reference[c.k, 0]) ** 2 + (c.py - cor.reference[c.k, 1]) ** 2
                  for c in cor.cubes)
        total += v.priority * (-cfg.w_area * area + cfg.w_ref * dev)
    return total


def pivot_deviation(cor: Corridor) -> float:
    """Summed squared distance between pivots and guidance samples."""
    p = cor.pivots()
    return float(np.sum((p - cor.reference[:, :2]) ** 2))


def _infeasible_family(model: ISTCModel, cert):
    if cert is None:
        return None
    weights = {}
    for i in np.flatnonzero(cert > 1e-9 * max(1.0, cert.max(initial=0.0))):
        fam = model.row_labels[i][0]
        weights[fam] = weights.get(fam, 0.0) + float(cert[i])
    return max(weights, key=weights.get) if weights else None


def extract_istc(model: ISTCModel, z: np.ndarray) -> list:
    nk = model.K + 1
    corridors = []
    for a, vid in enumerate(model.vehicle_ids):
        cubes = []
        for k in range(nk):
            base = NV * (a * nk + k)
            px, py, x1, x2, y1, y2 = (float(t) for t in z[base:base + NV])
            cubes.append(CorridorCube(k, px, py, max(x1, 0.0), max(x2, 0.0),
                                      max(y1, 0.0), max(y2, 0.0)))
        corridors.append(Corridor(vid, cubes, model.references[vid]))
    return corridors


def _group_keys(model: ISTCModel) -> dict:
    out = {("pair",) + k: idx for k, idx in model.pair_groups.items()}
    out.update({("obstacle",) + k: idx for k, idx in model.obstacle_groups.items()})
    return out


def _assemble(model: ISTCModel, cont: np.ndarray) -> np.ndarray:
    """Full point from continuous values: in every disjunction the side
    with the most slack stays active and the others are released."""
    p = model.problem.base
    z = np.concatenate([cont, np.ones(model.n_binary)])
    # rows evaluated with every indicator at 0, i.e. the plain separations
    z0 = np.concatenate([cont, np.zeros(model.n_binary)])
    slack = p.b - p.row_values(z0)
    for g in list(model.pair_groups.values()) + list(model.obstacle_groups.values()):
        s = [slack[model.big_rows[j]] for j in g]
        z[g[int(np.argmax(s))]] = 0.0
    return z


def _stage_time(step, deadline):
    if step is None or deadline is None:
        return step
    return min(step, deadline - time.perf_counter())


def _prioritized_incumbent(s: Scenario, guidance: dict, model: ISTCModel, node_limit,
                           time_limit, stats, deadline=None):
    """Feasible start for the full search by prioritized planning.

    Vehicles are planned alone in priority order; the cubes of those already
    planned become moving obstacles (grown to the inter-vehicle gap) and the
    start boxes of those still to come are blocked at k = 0.  When a vehicle
    finds no corridor it swaps places with its predecessor and planning
    resumes from there.  The resulting disjunct choices are fixed and the
    continuous part re-optimized jointly.  Returns None on failure.
    """
    cfg = s.config
    order = sorted(s.vehicles, key=lambda v: (-v.priority, v.id))
    x_lo, x_hi, y_lo, y_hi = s.grid.extent
    far = (x_hi + 1e3, x_hi + 1e3 + 1.0, y_hi + 1e3, y_hi + 1e3 + 1.0)
    ex, ey = cfg.gamma_x_v2v - cfg.r_x_v2o, cfg.gamma_y_v2v - cfg.r_y_v2o

    def grown(b):
        x0, x1, y0, y1 = b
        cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
        return (min(x0 - ex, cx), max(x1 + ex, cx), min(y0 - ey, cy), max(y1 + ey, cy))

    nk = model.K + 1
    next_id = max([o.id for o in s.obstacles], default=0) + 1
    cache = {}  # planned prefix (vehicle ids) -> corridor of its last vehicle

    def stage(prefix, rest):
        key = tuple(u.id for u in prefix)
        if key in cache:
            return cache[key]
        v = prefix[-1]
        extra = []
        for u in prefix[:-1]:
            boxes = tuple(grown(b) for b in cache[tuple(w.id for w in prefix[:prefix.index(u) + 1])]
                          .bounds_array())
            extra.append(ObstacleBox(next_id + len(extra), *boxes[0], per_time=boxes))
        for u in rest:
            sx, sy = u.start_pose[0], u.start_pose[1]
            d = u.box_extents(u.start_pose)
            b0 = grown((sx + d[0], sx + d[1], sy + d[2], sy + d[3]))
            extra.append(ObstacleBox(next_id + len(extra), *b0,
                                     per_time=(b0,) + (far,) * (nk - 1)))
        sub = Scenario([v], list(s.obstacles) + extra, s.grid, cfg, s.guidance, s.name)
        m = build_miqp(sub, guidance)
        tl = _stage_time(time_limit, deadline)
        if tl is not None and tl <= 0:
            return None
        try:
            sol = solve_miqp(m.problem, node_limit=node_limit, time_limit=tl,
                             branch_rule="ordered")
        except MIQPTimeout as exc:
            stats["heuristic_nodes"] += exc.stats["nodes"]
            cache[key] = None
            return None
        stats["heuristic_nodes"] += sol.stats["nodes"]
        cache[key] = None if sol.status == "infeasible" else \
            extract_istc(m, _shrink(m, sol.z))[0]
        return cache[key]

    r = 0
    swaps = 0
    while r < len(order):
        if stage(order[:r + 1], order[r + 1:]) is not None:
            r += 1
            continue
        if r == 0 or swaps >= len(order):
            return None
        order[r - 1], order[r] = order[r], order[r - 1]
        swaps += 1
        r -= 1
    planned = {v.id: cache[tuple(u.id for u in order[:i + 1])] for i, v in enumerate(order)}
    nk_nv = NV * nk
    cont = np.zeros(model.n_continuous)
    for a, vid in enumerate(model.vehicle_ids):
        cont[a * nk_nv:(a + 1) * nk_nv] = _stage_vector(planned[vid])
    z = _assemble(model, cont)
    p = model.problem.base
    bi = model.problem.binary_indices
    lb, ub = p.lb.copy(), p.ub.copy()
    lb[bi] = ub[bi] = z[bi]
    try:
        pol = solve_qp(p.with_bounds(lb, ub), check=False)
        if pol.status == "optimal":
            pol.z[bi] = z[bi]
            if np.all(p.row_values(pol.z) <= p.b + 1e-7):
                return pol.z
    except QPError:
        pass
    return z if np.all(p.row_values(z) <= p.b + 1e-7) else None


def _shrink(m: ISTCModel, z: np.ndarray) -> np.ndarray:
    """Smallest cubes around fixed pivots that keep every row and disjunct
    choice of a solved model, so later vehicles are blocked no more than
    necessary.  Returns ``z`` unchanged if the shrink QP fails."""
    p = m.problem.base
    n = p.n
    nc = m.n_continuous
    lb, ub = p.lb.copy(), p.ub.copy()
    piv = np.zeros(n, dtype=bool)
    piv[:nc] = (np.arange(nc) % NV) < 2
    piv[nc:] = True
    lb[piv] = ub[piv] = z[piv]
    c = np.zeros(n)
    c[:nc][~piv[:nc]] = 1.0
    q = QPProblem(1e-6 * sp.eye(n, format="csc"), c, p.A, p.b, lb, ub)
    try:
        sol = solve_qp(q, x0=z, check=False)
    except QPError:
        return z
    if sol.status != "optimal" or p.max_violation(sol.z) > 1e-7:
        return z
    out = sol.z.copy()
    out[piv] = z[piv]
    return out


def _stage_vector(cor: Corridor) -> np.ndarray:
    return np.array([[c.px, c.py, c.x1, c.x2, c.y1, c.y2] for c in cor.cubes]).ravel()


def _sequential_incumbent(s: Scenario, guidance: dict, model: ISTCModel, node_limit,
                          time_limit, stats, deadline=None):
    """Feasible start for the full search: vehicles join one at a time in
    priority order, each stage re-solving all cubes with the disjunct
    choices among earlier vehicles held fixed.  Returns None on failure."""
    order = sorted(s.vehicles, key=lambda v: (-v.priority, v.id))
    fixed = {}
    sol = None
    for r in range(1, len(order) + 1):
        ids = {v.id for v in order[:r]}
        sub = Scenario([v for v in s.vehicles if v.id in ids], s.obstacles, s.grid,
                       s.config, s.guidance, s.name)
        m = model if r == len(order) else build_miqp(sub, guidance)
        base = m.problem.base
        lb, ub = base.lb.copy(), base.ub.copy()
        keys = _group_keys(m)
        for key, idx in keys.items():
            if key in fixed:
                lb[idx] = ub[idx] = fixed[key]
        prob = MIQPProblem(base.with_bounds(lb, ub), m.problem.binary_indices,
                           m.problem.groups)
        tl = _stage_time(time_limit, deadline)
        if tl is not None and tl <= 0:
            return None
        try:
            sol = solve_miqp(prob, node_limit=node_limit, time_limit=tl,
                             branch_rule="ordered")
        except MIQPTimeout as exc:
            stats["heuristic_nodes"] += exc.stats["nodes"]
            return None
        stats["heuristic_nodes"] += sol.stats["nodes"]
        if sol.status == "infeasible":
            return None
        for key, idx in keys.items():
            fixed[key] = np.round(sol.z[idx])
    return sol.z


def solve_istc(s: Scenario, guidance: dict, node_budget=None, time_budget=None,
               trace=None, deterministic=False) -> ISTCSet:
    """Build and solve the corridor MIQP.

    Two priority-ordered heuristics (prioritized planning and a sequential
    joint pass) each propose an incumbent; the better one seeds branch and
    bound, which improves it within the remaining budget.  With
    ``deterministic`` only node budgets apply, so results are reproducible.
    """
    cfg = s.config
    t0 = time.perf_counter()
    node_budget = node_budget or cfg.node_budget
    time_budget = time_budget or cfg.time_budget
    model = build_miqp(s, guidance)
    V = len(s.vehicles)
    stats = {"heuristic_nodes": 0}
    inc = None
    if V > 1:
        step_nodes = max(50, node_budget // (4 * V))
        step_time = None if deterministic else 0.35 * time_budget / V
        found = []
        for k, heuristic in enumerate((_prioritized_incumbent, _sequential_incumbent)):
            deadline = None if deterministic else t0 + 0.35 * (k + 1) * time_budget
            z = heuristic(s, guidance, model, step_nodes, step_time, stats, deadline)
            if z is not None:
                found.append((model.problem.base.objective(z), k, z))
        if found:
            inc = min(found, key=lambda e: (e[0], e[1]))[2]
            stats["heuristic_objectives"] = {("prioritized", "sequential")[k]: obj
                                             for obj, k, _ in found}
    stats["heuristic_time"] = time.perf_counter() - t0
    remaining_nodes = max(node_budget - stats["heuristic_nodes"], 1)
    # a small reserve covers the last node and the read-back
    remaining_time = None if deterministic else \
        max(0.95 * time_budget - (time.perf_counter() - t0), 0.0)
    try:
        sol = solve_miqp(model.problem, node_limit=remaining_nodes, time_limit=remaining_time,
                         trace=trace, incumbent=inc)
    except MIQPTimeout as exc:
        raise ISTCTimeoutError(f"corridor search timed out: {exc}") from None
    if sol.status == "infeasible":
        fam = _infeasible_family(model, sol.certificate)
        raise ISTCInfeasibleError(
            f"no conflict-free corridors exist (last pruned node blocked by {fam} constraints)",
            family=fam)
    corridors = extract_istc(model, sol.z)
    stats.update(sol.stats)
    stats.pop("incumbents", None)
    stats["status"] = sol.status
    stats["timeout"] = sol.status == "feasible-timeout"
    stats["time"] = time.perf_counter() - t0
    stats["n_continuous"] = model.n_continuous
    stats["n_binary"] = model.n_binary
    out = ISTCSet(corridors, model.K, sol.objective, stats)
    # indicator values, kept for soundness checks
    out.solve_stats["indicators"] = {
        "pairs": {f"{i},{j},{k}": [int(round(sol.z[d])) for d in idx]
                  for (i, j, k), idx in model.pair_groups.items()},
        "obstacles": {f"{i},{m},{k}": [int(round(sol.z[d])) for d in idx]
                      for (i, m, k), idx in model.obstacle_groups.items()},
    }
    return out


def check_istc(istc: ISTCSet, s: Scenario, tol=CHECK_TOL) -> list:
    """Re-check every corridor constraint on the cube values alone."""
    cfg = s.config
    rep = []
    x_lo, x_hi, y_lo, y_hi = s.grid.extent
    by_id = {c.vehicle_id: c for c in istc.corridors}
    for cor in istc.corridors:
        v = s.vehicle(cor.vehicle_id)
        gc = v.gamma_car
        h = v.reach
        cubes = cor.cubes
        if len(cubes) != istc.K + 1:
            rep.append(f"vehicle {v.id}: expected {istc.K + 1} cubes, got {len(cubes)}")
            continue
        for cb in cubes:
            k = cb.k
            if min(cb.x1, cb.x2, cb.y1, cb.y2) < -tol:
                rep.append(f"vehicle {v.id} k={k}: negative scale")
            if cb.x1 + cb.x2 < gc - tol or cb.y1 + cb.y2 < gc - tol:
                rep.append(f"vehicle {v.id} k={k}: cube smaller than car square")
            if (cb.x_min < x_lo - tol or cb.x_max > x_hi + tol
                    or cb.y_min < y_lo - tol or cb.y_max > y_hi + tol):
                rep.append(f"vehicle {v.id} k={k}: cube leaves the map")
            if k == 0:
                prev = (v.start_pose[0], v.start_pose[1])
                th = v.start_pose[2]
            else:
                pc = cubes[k - 1]
                prev = (pc.px, pc.py)
                th = unit_headings(cor.reference, k)
            (bx, fx), (by, fy) = drive_range(v, th, cfg)
            if (cb.x_min < prev[0] - bx - h - tol or cb.x_max > prev[0] + fx + h + tol
                    or cb.y_min < prev[1] - by - h - tol or cb.y_max > prev[1] + fy + h + tol):
                rep.append(f"vehicle {v.id} k={k}: cube exceeds driving range")
            if k > 0:
                pc = cubes[k - 1]
                if (cb.x_max - pc.x_min < gc - tol or pc.x_max - cb.x_min < gc - tol
                        or cb.y_max - pc.y_min < gc - tol or pc.y_max - cb.y_min < gc - tol):
                    rep.append(f"vehicle {v.id} k={k}: insufficient overlap with cube {k - 1}")
                sxm, sym = pivot_step(v, th, cfg)
                if abs(cb.px - pc.px) > sxm + tol or abs(cb.py - pc.py) > sym + tol:
                    rep.append(f"vehicle {v.id} k={k}: pivot step too long")
        if cfg.tracking_rows:
            rep.extend(_check_tracking(cor, v, cfg, tol))
        d = v.box_extents(v.start_pose)
        c0 = cubes[0]
        sx, sy = v.start_pose[0], v.start_pose[1]
        if (c0.x_min > sx + d[0] + tol or c0.x_max < sx + d[1] - tol
                or c0.y_min > sy + d[2] + tol or c0.y_max < sy + d[3] - tol):
            rep.append(f"vehicle {v.id} k=0: start cube does not hold the car box")
        for ob in s.obstacles:
            for cb in cubes:
                ox0, ox1, oy0, oy1 = ob.at(cb.k)
                gap = max(cb.x_min - ox1 - cfg.r_x_v2o, ox0 - cb.x_max - cfg.r_x_v2o,
                          cb.y_min - oy1 - cfg.r_y_v2o, oy0 - cb.y_max - cfg.r_y_v2o)
                if gap < -tol:
                    rep.append(f"vehicle {v.id} obstacle {ob.id} k={cb.k}: too close to obstacle")
    ids = [c.vehicle_id for c in istc.corridors]
    for i, j in combinations(ids, 2):
        ci, cj = by_id[i], by_id[j]
        for a, b in zip(ci.cubes, cj.cubes):
            gap = max(a.x_min - b.x_max - cfg.gamma_x_v2v, b.x_min - a.x_max - cfg.gamma_x_v2v,
                      a.y_min - b.y_max - cfg.gamma_y_v2v, b.y_min - a.y_max - cfg.gamma_y_v2v)
            if gap < -tol:
                rep.append(f"vehicles {i},{j} k={a.k}: cubes overlap")
    return rep


def _check_tracking(cor: Corridor, v: VehicleSpec, cfg, tol) -> list:
    rep = []
    ref = cor.reference
    m = cfg.tracking_margin
    piv = cor.pivots()
    for k in range(1, len(cor.cubes)):
        e = v.box_extents((piv[k, 0], piv[k, 1], ref[k, 2]))
        for j in (k - 1, k):
            cb = cor.cubes[j]
            if (cb.x_min > piv[k, 0] + e[0] - m + tol or cb.x_max < piv[k, 0] + e[1] + m - tol
                    or cb.y_min > piv[k, 1] + e[2] - m + tol or cb.y_max < piv[k, 1] + e[3] + m - tol):
                rep.append(f"vehicle {v.id} k={k}: car at pivot does not fit cube {j}")
    A = pivot_accel(v, cfg)
    for k, coefs, const in tracking_terms(v, ref, cfg):
        val = sum(w * piv[j] for j, w in coefs.items()) + const
        if np.max(np.abs(val)) > A + tol:
            rep.append(f"vehicle {v.id} k={k}: pivot deviation changes speed too fast")
    return rep


def istc_to_dict(istc: ISTCSet) -> dict:
    stats = {k: v for k, v in istc.solve_stats.items() if k not in ("indicators",)}
    return {
        "K": istc.K,
        "objective": istc.objective_value,
        "solve_stats": stats,
        "corridors": [
            {"vehicle": c.vehicle_id,
             "reference": [list(map(float, r)) for r in c.reference],
             "cubes": [{"k": cb.k, "x_min": cb.x_min, "x_max": cb.x_max, "y_min": cb.y_min,
                        "y_max": cb.y_max, "pivot_x": cb.px, "pivot_y": cb.py}
                       for cb in c.cubes]}
            for c in istc.corridors],
    }


def istc_from_dict(d: dict) -> ISTCSet:
    cors = []
    for c in d["corridors"]:
        cubes = [CorridorCube.from_bounds(cb["k"], cb["x_min"], cb["x_max"], cb["y_min"],
                                          cb["y_max"], cb["pivot_x"], cb["pivot_y"])
                 for cb in c["cubes"]]
        cors.append(Corridor(c["vehicle"], cubes, np.array(c["reference"], dtype=float)))
    return ISTCSet(cors, int(d["K"]), d.get("objective", float("nan")), d.get("solve_stats", {}))


def dumps_istc(istc: ISTCSet, include_timing=True) -> str:
    d = istc_to_dict(istc)
    if not include_timing:
        d["solve_stats"] = {k: v for k, v in d["solve_stats"].items()
                            if not k.endswith("time")}
    return json.dumps(d, indent=1)


def loads_istc(text: str) -> ISTCSet:
    return istc_from_dict(json.loads(text))
