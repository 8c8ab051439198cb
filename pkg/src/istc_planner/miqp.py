"""Branch-and-bound over binary variables on top of :func:`solve_qp`."""
from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .qp import QPConvergenceError, QPError, QPProblem, check_psd, solve_qp

log = logging.getLogger(__name__)

INT_TOL = 1e-6
FEAS_TOL = 1e-6


class MIQPTimeout(QPError):
    """Budget exhausted before any integer-feasible point was found."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats


@dataclass
class MIQPProblem:
    """A convex QP in which ``binary_indices`` must take values 0 or 1.

    ``groups`` optionally lists disjunctions: sets of binaries of which at
    least one must be 0 in every feasible point (the model itself has to
    enforce this with a row).  They only steer branching.
    """
    base: QPProblem
    binary_indices: np.ndarray
    groups: list = field(default_factory=list)

    def __post_init__(self):
        self.binary_indices = np.asarray(self.binary_indices, dtype=int)
        bi = self.binary_indices
        if np.any(self.base.lb[bi] < 0) or np.any(self.base.ub[bi] > 1):
            raise ValueError("binary variables must have bounds within [0, 1]")
        self.groups = [np.asarray(g, dtype=int) for g in self.groups]
        pos = {int(j): k for k, j in enumerate(bi)}
        try:
            # positions of the group members within binary_indices
            self.group_pos = [np.array([pos[int(j)] for j in g], dtype=int) for g in self.groups]
        except KeyError:
            raise ValueError("groups may only contain binary variables") from None


@dataclass
class BnBNode:
    lb: np.ndarray  # bounds of the binary variables only
    ub: np.ndarray
    bound: float
    depth: int
    parent_objective: float = -np.inf
    warm: np.ndarray = None

    @property
    def fixed(self) -> dict:
        idx = np.flatnonzero(self.lb == self.ub)
        return {int(i): int(self.lb[i]) for i in idx}


@dataclass
class MIQPSolution:
    status: str  # "optimal", "feasible-timeout" or "infeasible"
    z: np.ndarray = None
    objective: float = np.inf
    stats: dict = field(default_factory=dict)
    # certificate of the last node pruned as infeasible (A-row weights)
    certificate: np.ndarray = None


def _purify(p: QPProblem, z, bins, free_mask, col_rows):
    """Round free binaries to 0 where every row they touch still holds.

    Binaries are visited in index order; each is set to 0 if all of its
    rows stay satisfied with the current values of the others, else to 1.
    Returns the rounded point and the rows it violates.
    """
    z = z.copy()
    A = p.A
    rows_val = p.row_values(z)
    for k, j in enumerate(bins):
        if not free_mask[k]:
            z[j] = round(z[j])
            continue
        rows, coefs = col_rows[k]
        old = z[j]
        trial = rows_val[rows] + coefs * (0.0 - old)
        if np.all(trial <= p.b[rows] + FEAS_TOL):
            new = 0.0
        else:
            new = 1.0
        rows_val[rows] += coefs * (new - old)
        z[j] = new
    violated = np.flatnonzero(rows_val > p.b + FEAS_TOL)
    return z, violated


def _polish(p: QPProblem, zr, bins, node, groups, stats):
    """Re-optimize the continuous part of an integral point.

    Within each disjunction group only the side with the most slack stays
    active; the others are released to 1 before the fixed-binary QP is
    solved.  Falls back to the unpolished point if that QP fails.
    """
    zb = np.round(zr[bins])
    if groups:
        slack = p.b - p.row_values(zr)
        A = sp.csc_matrix(p.A)
        for g in groups:
            zeros = g[(zb[g] == 0) & (node.lb[g] != node.ub[g])]
            if np.any((zb[g] == 0) & (node.lb[g] == node.ub[g])) or zeros.size < 2:
                continue
            best = max(zeros, key=lambda k: slack[A.indices[A.indptr[bins[k]]:A.indptr[bins[k] + 1]]].min())
            for k in zeros:
                if k != best:
                    zb[k] = 1.0
    lb = p.lb.copy()
    ub = p.ub.copy()
    lb[bins] = ub[bins] = zb
    stats["qp_solves"] += 1
    try:
        sol = solve_qp(p.with_bounds(lb, ub), tol=1e-9, max_iter=150, check=False)
    except QPConvergenceError:
        return zr, p.objective(zr)
    if sol.status != "optimal":
        return zr, p.objective(zr)
    z = sol.z.copy()
    z[bins] = zb
    obj = p.objective(z)
    if p.max_violation(z) > FEAS_TOL or obj > p.objective(zr):
        return zr, p.objective(zr)
    return z, obj


def solve_miqp(problem: MIQPProblem, node_limit=50_000, time_limit=60.0,
               rel_gap=1e-6, trace=None, incumbent=None,
               branch_rule="ambiguous") -> MIQPSolution:
    """Minimize a convex MIQP by best-bound branch and bound with plunging.

    Search is depth-first until the first incumbent is found; afterwards each
    processed node dives into its best-guess child while the siblings wait on
    a heap ordered by bound.  ``incumbent`` may supply a known feasible
    point.  With ``branch_rule="ordered"`` the first violated group in list
    order is branched on, otherwise the most ambiguous one.  If a ``trace``
    list is given, one ``(parent_objective, objective)`` tuple is appended
    per solved node.  ``time_limit=None`` leaves only the node budget, which
    makes the search reproducible.

    Raises ``MIQPTimeout`` when the budget runs out without an incumbent.
    """
    p = problem.base
    check_psd(p.Q)
    bins = problem.binary_indices
    t0 = time.perf_counter()
    A = sp.csc_matrix(p.A) if p.m else sp.csc_matrix((0, p.n))
    col_rows = []
    for j in bins:
        sl = slice(A.indptr[j], A.indptr[j + 1])
        col_rows.append((A.indices[sl].copy(), A.data[sl].copy()))
    bin_rows = np.zeros(p.m, dtype=bool)
    for rows, _ in col_rows:
        bin_rows[rows] = True

    stats = {"nodes": 0, "qp_solves": 0, "wall_time": 0.0, "incumbents": [],
             "pruned_infeasible": 0, "max_depth": 0}
    inc_obj = np.inf
    if incumbent is not None:
        incumbent = np.asarray(incumbent, dtype=float).copy()
        zb = incumbent[bins]
        if p.max_violation(incumbent) > FEAS_TOL or np.abs(zb - np.round(zb)).max(initial=0) > INT_TOL:
            raise ValueError("supplied incumbent is not feasible")
        incumbent[bins] = np.round(zb)
        inc_obj = p.objective(incumbent)
        stats["incumbents"].append((0, inc_obj))
    last_cert = None

    def gap_abs(obj):
        return rel_gap * max(1.0, abs(obj))

    def evaluate(node: BnBNode):
        nonlocal last_cert
        lb = p.lb.copy()
        ub = p.ub.copy()
        lb[bins] = node.lb
        ub[bins] = node.ub
        sub = p.with_bounds(lb, ub)
        x0 = None
        if node.warm is not None:
            x0 = np.clip(node.warm, lb, ub)
        stats["qp_solves"] += 1
        try:
            sol = solve_qp(sub, x0=x0, tol=1e-9, max_iter=150, check=False)
        except QPConvergenceError:
            # retry from the default starting point
            stats["qp_solves"] += 1
            sol = solve_qp(sub, tol=1e-8, max_iter=300, check=False)
        if sol.status == "infeasible":
            last_cert = sol.certificate[0]
        return sol, sub

    heap = []
    counter = 0

    def push(node):
        nonlocal counter
        heapq.heappush(heap, (node.bound, counter, node))
        counter += 1

    root = BnBNode(lb=p.lb[bins].copy(), ub=p.ub[bins].copy(), bound=-np.inf, depth=0)
    stack = [root]  # plunging stack, used until the first incumbent
    timed_out = False

    while stack or heap:
        if stats["nodes"] >= node_limit or (
                time_limit is not None and time.perf_counter() - t0 > time_limit):
            timed_out = True
            break
        if stack:
            node = stack.pop()
        else:
            _, _, node = heapq.heappop(heap)
            if node.bound >= inc_obj - gap_abs(inc_obj):
                continue
        if node.bound >= inc_obj - gap_abs(inc_obj):
            continue
        stats["nodes"] += 1
        stats["max_depth"] = max(stats["max_depth"], node.depth)
        sol, sub = evaluate(node)
        if sol.status == "infeasible":
            stats["pruned_infeasible"] += 1
            continue
        obj = sol.objective
        if trace is not None:
            trace.append((node.parent_objective, obj))
        if obj >= inc_obj - gap_abs(inc_obj):
            continue
        z = sol.z
        free_mask = node.lb != node.ub
        zr, violated = _purify(p, z, bins, free_mask, col_rows)
        if violated.size == 0:
            zr, robj = _polish(p, zr, bins, node, problem.group_pos, stats)
            if robj < inc_obj:
                inc_obj = robj
                incumbent = zr
                stats["incumbents"].append((stats["nodes"], inc_obj))
                log.debug("incumbent %.6f at node %d", inc_obj, stats["nodes"])
            if robj <= obj + gap_abs(obj):
                continue
        children = _branch_groups(problem.group_pos, node, z[bins], violated, col_rows, p.m,
                                  branch_rule)
        if children is None:
            children = _branch_variable(node, z[bins], free_mask, violated, col_rows, p.m)
        if not children:
            continue
        children = [BnBNode(clb, cub, obj, node.depth + 1, obj, z) for clb, cub in children]
        # children are listed best guess first; dive into the first one
        if incumbent is None:
            stack.extend(reversed(children))
        else:
            stack.append(children[0])
            for ch in children[1:]:
                push(ch)
            # an incumbent now exists: whatever else the initial dive left
            # on the stack goes to the heap
            for nd in stack[:-1]:
                push(nd)
            del stack[:-1]

    stats["wall_time"] = time.perf_counter() - t0
    if incumbent is None:
        if timed_out:
            raise MIQPTimeout(
                f"no integer-feasible point after {stats['nodes']} nodes "
                f"({stats['wall_time']:.1f} s)", stats=stats)
        return MIQPSolution(status="infeasible", stats=stats, certificate=last_cert)
    remaining = [nd.bound for _, _, nd in heap] + [nd.bound for nd in stack]
    best_bound = min(remaining + [inc_obj])
    stats["best_bound"] = best_bound
    stats["gap"] = (inc_obj - best_bound) / max(1.0, abs(inc_obj))
    status = "optimal"
    if timed_out and best_bound < inc_obj - gap_abs(inc_obj):
        status = "feasible-timeout"
    return MIQPSolution(status=status, z=incumbent, objective=inc_obj, stats=stats)


def _violated_mask(violated, m):
    vset = np.zeros(m, dtype=bool)
    vset[violated] = True
    return vset


def _branch_groups(groups, node, zb, violated, col_rows, m, rule="ambiguous"):
    """One child per free member of a violated group, each forcing that
    member to 0: the first such group for ``rule="ordered"``, else the one
    whose members are all furthest from 0.  Returns None when no group
    applies."""
    if not groups or violated.size == 0:
        return None
    vset = _violated_mask(violated, m)
    best, best_score = None, -1.0
    for g in groups:
        if np.any(node.ub[g] == 0):
            continue  # already satisfied
        free = g[node.lb[g] != node.ub[g]]
        if free.size == 0:
            continue
        if not any(np.any(vset[col_rows[k][0]]) for k in g):
            continue
        if rule == "ordered":
            best = free
            break
        score = float(zb[free].min())
        if score > best_score + 1e-12:
            best, best_score = free, score
    if best is None:
        return None
    order = best[np.argsort(zb[best], kind="stable")]
    out = []
    for k in order:
        clb, cub = node.lb.copy(), node.ub.copy()
        clb[k] = cub[k] = 0.0
        out.append((clb, cub))
    return out


def _branch_variable(node, zb, free_mask, violated, col_rows, m):
    """Branch on the most fractional binary among those touching a row the
    rounded point violates; fall back to all fractional binaries."""
    frac = np.where(free_mask, np.abs(zb - np.round(zb)), -1.0)
    cand = np.zeros(zb.size, dtype=bool)
    if violated.size:
        vset = _violated_mask(violated, m)
        for k, (rows, _) in enumerate(col_rows):
            if free_mask[k] and np.any(vset[rows]):
                cand[k] = True
    if not np.any(cand):
        cand = free_mask & (frac > INT_TOL)
    if not np.any(cand):
        cand = free_mask.copy()
    if not np.any(cand):
        return []
    k = int(np.argmax(np.where(cand, frac, -1.0)))  # ties resolve to the lowest index
    near = 1.0 if zb[k] > 0.5 else 0.0
    out = []
    for val in (near, 1.0 - near):
        clb, cub = node.lb.copy(), node.ub.copy()
        clb[k] = cub[k] = val
        out.append((clb, cub))
    return out
