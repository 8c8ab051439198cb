import math

import numpy as np
import pytest

from istc_planner.corridors import Corridor, CorridorCube, ISTCSet
from istc_planner.metrics import (MetricsError, check_collisions, check_containment, clearance,
                                  dynamics_residual, min_separation, path_length, rectangle,
                                  sat_gap, summarize)
from istc_planner.scenario import OccupancyGrid, PlannerConfig, Scenario, VehicleSpec
from istc_planner.trajectory import (Trajectory, build_nlp, containment_violations,
                                     integrate_controls, solve_trajectory)


def _vehicle(vid, y=0.0):
    return VehicleSpec(vid, 4.0, 2.0, 2.7, (0.0, y, 0.0), (25.0, y, 0.0))


def _scenario(vehicles):
    grid = OccupancyGrid((-50.0, -50.0), 1.0, 100, 100)
    return Scenario(vehicles, [], grid, PlannerConfig(), name="metrics")


def _coast(vid, x0, steps=50, dt=0.1, controls=None):
    u = np.zeros((steps, 2)) if controls is None else np.asarray(controls, float)
    S = integrate_controls(x0, u, dt, 2.7)
    return Trajectory(vid, S, u, dt, 2.7, int(round(1.0 / dt)))


def test_parallel_lanes_are_clear():
    s = _scenario([_vehicle(1), _vehicle(2, 10.0)])
    a = _coast(1, (0, 0, 0, 0, 5, 0))
    b = _coast(2, (0, 10, 0, 0, 5, 0))
    assert check_collisions([a, b], s) == []
    assert min_separation([a, b], s)["1,2"] == pytest.approx(8.0, abs=1e-12)


def test_identical_trajectories_collide_everywhere():
    s = _scenario([_vehicle(1), _vehicle(2)])
    a = _coast(1, (0, 0, 0, 0, 5, 0))
    b = _coast(2, (0, 0, 0, 0, 5, 0))
    v = check_collisions([a, b], s)
    assert [x.t for x in v] == list(range(51))
    assert all(x.vehicles == (1, 2) for x in v)


def test_touching_counts_as_collision():
    s = _scenario([_vehicle(1), _vehicle(2, 2.0)])
    a = _coast(1, (0, 0, 0, 0, 5, 0), steps=3)
    b = _coast(2, (0, 2, 0, 0, 5, 0), steps=3)
    assert len(check_collisions([a, b], s)) == 4
    b = _coast(2, (0, 2 + 1e-9, 0, 0, 5, 0), steps=3)
    assert check_collisions([a, b], s) == []


def _sampled_gap(p, q, n=200):
    """Brute force: distance between dense boundary samples (0 if a sample
    of one lies inside the other)."""
    def boundary(r):
        fl, fr, rl, rr = r
        loop = [fl, fr, rr, rl, fl]
        return np.vstack([np.linspace(loop[i], loop[i + 1], n) for i in range(4)])

    def inside(pts, r):
        fl, fr, rl, _ = r
        e1, e2 = fr - fl, rl - fl
        u = (pts - fl) @ e1 / (e1 @ e1)
        w = (pts - fl) @ e2 / (e2 @ e2)
        return np.any((u >= 0) & (u <= 1) & (w >= 0) & (w <= 1))

    bp, bq = boundary(p), boundary(q)
    if inside(bp, q) or inside(bq, p):
        return 0.0
    d = np.hypot(bp[:, None, 0] - bq[None, :, 0], bp[:, None, 1] - bq[None, :, 1])
    return float(d.min())


def test_clearance_against_sampling():
    rng = np.random.default_rng(3)
    for _ in range(40):
        p = rectangle(0.0, 0.0, rng.uniform(-3, 3), 4.0, 2.0, 0.65)
        q = rectangle(*rng.uniform(-8, 8, 2), rng.uniform(-3, 3), 4.0, 2.0, 0.65)
        c = clearance(p, q)
        ref = _sampled_gap(p, q)
        assert c == pytest.approx(ref, abs=0.05)
        assert (sat_gap(p, q) > 0) == (c > 0) or ref < 0.05


def test_rigid_motion_and_symmetry():
    rng = np.random.default_rng(9)
    s = _scenario([_vehicle(1), _vehicle(2)])
    ctrl = np.column_stack([rng.normal(0, 0.2, 50), rng.normal(0, 0.5, 50)])
    a = _coast(1, (0, 0, 0, 0, 5, 0), controls=ctrl)
    b = _coast(2, (30, 3, math.pi, 0, 5, 0), controls=ctrl[::-1])
    base = min_separation([a, b], s)["1,2"]
    flip = min_separation([b, a], s)["1,2"]
    assert flip == base
    phi, shift = 0.7, np.array([3.0, -4.0])
    R = np.array([[math.cos(phi), -math.sin(phi)], [math.sin(phi), math.cos(phi)]])

    def moved(tr):
        S = tr.states.copy()
        S[:, :2] = S[:, :2] @ R.T + shift
        S[:, 2] += phi
        return Trajectory(tr.vehicle_id, S, tr.controls, tr.dt, tr.wheelbase, tr.steps_per_unit)

    assert min_separation([moved(a), moved(b)], s)["1,2"] == pytest.approx(base, abs=1e-9)
    assert len(check_collisions([moved(a), moved(b)], s)) == len(check_collisions([a, b], s))


def test_dt_mismatch():
    s = _scenario([_vehicle(1), _vehicle(2, 10.0)])
    a = _coast(1, (0, 0, 0, 0, 5, 0))
    b = _coast(2, (0, 10, 0, 0, 5, 0), dt=0.05)
    with pytest.raises(MetricsError):
        check_collisions([a, b], s)


def test_path_length():
    assert path_length(_coast(1, (0, 0, 0, 0, 5, 0))) == pytest.approx(25.0, abs=1e-12)
    assert path_length(_coast(1, (0, 0, 0, 0, 0, 0))) == 0.0
    th = np.linspace(0.0, math.pi / 2, 1001)
    arc = np.column_stack([10 * np.cos(th), 10 * np.sin(th)])
    assert path_length(arc) == pytest.approx(15.708, abs=0.01)


def test_dynamics_residual():
    tr = _coast(1, (0, 0, 0.3, 0.1, 4, 0.5), controls=np.full((30, 2), 0.1))
    assert dynamics_residual(tr) <= 1e-12
    tr.states[7, 1] += 1e-6
    assert dynamics_residual(tr) == pytest.approx(1e-6, rel=1e-6)


def _box_corridor(x_max_prev_last, K=5):
    cubes = [CorridorCube(k, 5.0 * k, 0.0, 5.0 * k + 5.0, 40.0 - 5.0 * k, 3.0, 3.0)
             for k in range(K + 1)]
    c = cubes[K - 1]
    cubes[K - 1] = CorridorCube(K - 1, c.px, c.py, c.x1, x_max_prev_last - c.px, c.y1, c.y2)
    ref = np.column_stack([5.0 * np.arange(K + 1), np.zeros(K + 1), np.zeros(K + 1)])
    return ISTCSet([Corridor(1, cubes, ref)], K)


def test_summarize_names_corner_out_by_one_centimetre():
    v = _vehicle(1)
    s = _scenario([v])
    tr = _coast(1, (0, 0, 0, 0, 5, 0))
    front_end = tr.states[-1, 0] + v.length - v.rear_overhang
    ok = summarize(_box_corridor(front_end), [tr], {"layer1": 1.0, "layer2": {1: 2.0}}, s)
    assert ok.passed and len(ok.vehicles) == 1
    rep = summarize(_box_corridor(front_end - 0.01), [tr], {"layer1": 1.0, "layer2": {1: 2.0}}, s)
    assert len(rep.violations) == 1
    viol = rep.violations[0]
    assert viol.kind == "containment" and viol.vehicles == (1,) and viol.t == 50
    assert viol.amount == pytest.approx(0.01, abs=1e-9)
    assert str(viol).startswith("containment vehicle 1 t=50: corner fl")
    assert not rep.passed
    assert "corner fl" in rep.to_text()


def test_containment_agrees_with_optimizer():
    K = 5
    ys = [0.0, 0.0, 1.5, 3.0, 3.0, 3.0]
    ref = np.column_stack([5.0 * np.arange(K + 1), ys, np.zeros(K + 1)])
    cubes = [CorridorCube(k, 5.0 * k, ys[k], 3.0, 10.0, 2.5, 2.5) for k in range(K + 1)]
    cor = Corridor(1, cubes, ref)
    v = _vehicle(1)
    cfg = PlannerConfig()
    tr = solve_trajectory(cor, v, config=cfg)
    istc = ISTCSet([cor], K)
    s = _scenario([v])
    nlp = build_nlp(cor, v, cfg)
    rng = np.random.default_rng(0)
    for trial in range(5):
        S = tr.states.copy()
        if trial:
            S[:, :3] += rng.normal(0, 0.3, size=(len(S), 3))
        moved = Trajectory(1, S, tr.controls, tr.dt, tr.wheelbase, tr.steps_per_unit)
        opt = containment_violations(S, nlp.boxes, v)
        # with an infinitely loose tolerance every step reports its worst excursion
        worst = np.full(len(S), -np.inf)
        for x in check_containment(istc, [moved], s, tol=-np.inf):
            worst[x.t] = max(worst[x.t], x.amount)
        assert np.allclose(worst[1:], opt[1:], atol=1e-9)


def test_report_serialization():
    v = _vehicle(1)
    s = _scenario([v])
    tr = _coast(1, (0, 0, 0, 0, 5, 0))
    cor = _box_corridor(100.0)
    rep = summarize(cor, [tr], {"layer1": 1.5, "layer2": {1: 2.0}}, s)
    assert rep.L_total == pytest.approx(25.0)
    assert "1.5" in rep.to_json(include_timing=True)
    assert "t_layer1" not in rep.to_json(include_timing=False)
    assert "t_layer1" not in rep.to_text(include_timing=False)
