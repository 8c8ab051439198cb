"""Batch entry point: scenario in, guidance, corridors, trajectories, report
and plots out."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import svg
from .corridors import ISTCError, check_istc, dumps_istc, solve_istc
from .guidance import GuidanceError, plan_guidance
from .metrics import summarize
from .qp import QPError
from .scenario import (ScenarioParseError, ScenarioValidationError, load_scenario,
                       validate_scenario)
from .scenarios import BUILTIN
from .trajectory import TrajectoryError, solve_trajectory

log = logging.getLogger("istc_planner")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GUIDANCE = 3
EXIT_ISTC = 4
EXIT_TRAJECTORY = 5
EXIT_IO = 6


class StageError(Exception):
    def __init__(self, stage, code, message):
        super().__init__(message)
        self.stage = stage
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="istc-planner",
        description="Two-layer multi-vehicle planner: corridors from an MIQP, then one "
                    "trajectory per vehicle inside its corridor.")
    p.add_argument("--scenario", required=True,
                   help="scenario JSON file, or a built-in name: " + ", ".join(sorted(BUILTIN)))
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--layer1-only", action="store_true", help="stop after the corridors")
    p.add_argument("--deterministic", action="store_true",
                   help="serial solves bounded by node counts only; outputs omit timings")
    p.add_argument("--time-budget", type=float, help="layer-1 wall-clock budget (s)")
    p.add_argument("--node-budget", type=int, help="layer-1 branch-and-bound node budget")
    p.add_argument("--dt", type=float, help="layer-2 step (s)")
    p.add_argument("--seed", type=int, default=0, help="seed for randomized components")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _load(args):
    path = args.scenario
    try:
        if os.path.exists(path):
            s = load_scenario(path, validate=False)
        elif path in BUILTIN:
            s = BUILTIN[path]()
        else:
            raise StageError("io", EXIT_IO, f"scenario file not found: {path}")
    except OSError as exc:
        raise StageError("io", EXIT_IO, f"cannot read scenario: {exc}") from None
    except (ScenarioParseError, ScenarioValidationError) as exc:
        raise StageError("validation", EXIT_VALIDATION, str(exc)) from None
    over = {}
    if args.time_budget is not None:
        over["time_budget"] = args.time_budget
    if args.node_budget is not None:
        over["node_budget"] = args.node_budget
    if args.dt is not None:
        over["dt"] = args.dt
    if over:
        s = dataclasses.replace(s, config=dataclasses.replace(s.config, **over))
    report = validate_scenario(s)
    if report:
        raise StageError("validation", EXIT_VALIDATION, "; ".join(report))
    return s


def _write(out, name, text):
    try:
        with open(os.path.join(out, name), "w", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise StageError("io", EXIT_IO, f"cannot write {name}: {exc}") from None


def run_pipeline(args) -> int:
    """Run every stage, writing outputs as they become available."""
    det = args.deterministic
    np.random.seed(args.seed)
    s = _load(args)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise StageError("io", EXIT_IO, f"cannot create {args.out}: {exc}") from None
    out = args.out
    cfg = s.config

    t0 = time.perf_counter()
    try:
        guidance = plan_guidance(s)
    except GuidanceError as exc:
        raise StageError("guidance", EXIT_GUIDANCE, str(exc)) from None
    t_guidance = time.perf_counter() - t0
    for vid in sorted(guidance):
        _write(out, f"guidance_{vid}.csv", guidance[vid].to_csv(cfg.time_unit))
    log.info("guidance: K=%d (%.2f s)", next(iter(guidance.values())).K, t_guidance)

    t0 = time.perf_counter()
    try:
        istc = solve_istc(s, guidance, deterministic=det)
    except (ISTCError, QPError) as exc:
        raise StageError("istc", EXIT_ISTC, str(exc)) from None
    t_l1 = time.perf_counter() - t0
    _write(out, "corridors.txt", dumps_istc(istc, include_timing=not det) + "\n")
    log.info("istc: %s objective %.4f (%.2f s)", istc.solve_stats.get("status"),
             istc.objective_value, t_l1)
    problems = check_istc(istc, s)
    if problems:
        raise StageError("istc", EXIT_ISTC, "corridor re-check failed: " + "; ".join(problems))

    for cor in istc.corridors:
        _write(out, f"plot_corridor_{cor.vehicle_id}.svg", svg.plot_corridor(s, cor))
    if args.layer1_only:
        _write(out, "report.txt", f"scenario: {s.name}\nlayer 1 only: "
               f"{istc.solve_stats.get('status')} objective {istc.objective_value:.6f}\n"
               "corridor re-check: passed\n")
        return EXIT_OK

    def one(v):
        t = time.perf_counter()
        tr = solve_trajectory(istc.corridor(v.id), v, config=cfg)
        return tr, time.perf_counter() - t

    results = {}
    errors = {}
    if det:
        for v in s.vehicles:
            try:
                results[v.id] = one(v)
            except TrajectoryError as exc:
                errors[v.id] = exc
    else:
        with ThreadPoolExecutor(max_workers=len(s.vehicles)) as pool:
            futs = {v.id: pool.submit(one, v) for v in s.vehicles}
            for vid, f in futs.items():
                try:
                    results[vid] = f.result()
                except TrajectoryError as exc:
                    errors[vid] = exc
    trajectories = [results[v.id][0] for v in s.vehicles if v.id in results]
    for tr in trajectories:
        _write(out, f"trajectory_{tr.vehicle_id}.csv", tr.to_csv())
        log.info("trajectory %d: cost %.4f (%.2f s)", tr.vehicle_id, tr.cost,
                 results[tr.vehicle_id][1])
    for cor in istc.corridors:
        tr = results.get(cor.vehicle_id, (None,))[0]
        _write(out, f"plot_corridor_{cor.vehicle_id}.svg", svg.plot_corridor(s, cor, tr))
    _write(out, "plot_xy.svg", svg.plot_xy(s, trajectories, guidance))
    _write(out, "plot_va.svg", svg.plot_va(s, trajectories))
    if errors:
        msg = "; ".join(str(errors[k]) for k in sorted(errors))
        raise StageError("trajectory", EXIT_TRAJECTORY, msg)

    timings = {"layer1": t_l1, "layer2": {vid: r[1] for vid, r in results.items()}}
    report = summarize(istc, trajectories, timings, s)
    _write(out, "report.txt", report.to_text(include_timing=not det))
    _write(out, "summary.json", report.to_json(include_timing=not det))
    if not report.passed:
        raise StageError("trajectory", EXIT_TRAJECTORY,
                         f"{len(report.violations)} violations in the final plan")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        code = run_pipeline(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    return code


if __name__ == "__main__":
    sys.exit(main())
