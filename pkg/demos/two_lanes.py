"""Two cars in opposite lanes: corridors, trajectories and the plan report.

Writes plot_xy.svg and plot_va.svg to the directory given on the command
line (default: the current directory).
"""
import os
import sys

import numpy as np

from istc_planner.corridors import check_istc, solve_istc
from istc_planner.guidance import plan_guidance
from istc_planner.metrics import summarize
from istc_planner.scenario import OccupancyGrid, PlannerConfig, Scenario, VehicleSpec
from istc_planner.svg import plot_va, plot_xy
from istc_planner.trajectory import solve_trajectory

out = sys.argv[1] if len(sys.argv) > 1 else "."
os.makedirs(out, exist_ok=True)

vehicles = [VehicleSpec(1, 4.0, 2.0, 2.7, (0.0, 0.0, 0.0), (20.0, 0.0, 0.0), priority=0.5),
            VehicleSpec(2, 4.0, 2.0, 2.7, (20.0, 7.0, np.pi), (0.0, 7.0, np.pi), priority=0.2)]
paths = {1: [(x, 0.0, 0.0) for x in np.linspace(0, 20, 41)],
         2: [(x, 7.0, np.pi) for x in np.linspace(20, 0, 41)]}
grid = OccupancyGrid((-10.0, -6.0), 0.5, 80, 36)
s = Scenario(vehicles, [], grid, PlannerConfig(), paths, name="two-lanes")

guidance = plan_guidance(s)
istc = solve_istc(s, guidance)
print(f"corridors: {istc.solve_stats.get('status')}, objective {istc.objective_value:.2f}, "
      f"re-check issues {len(check_istc(istc, s))}")
trajectories = [solve_trajectory(istc.corridor(v.id), v, config=s.config) for v in vehicles]
report = summarize(istc, trajectories, {}, s)
print(report.to_text(include_timing=False))

with open(os.path.join(out, "plot_xy.svg"), "w") as fh:
    fh.write(plot_xy(s, trajectories, guidance))
with open(os.path.join(out, "plot_va.svg"), "w") as fh:
    fh.write(plot_va(s, trajectories))
