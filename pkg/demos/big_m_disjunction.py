"""Two points on a line that want the same spot but must stay 2 apart.

A single binary picks which side each point takes, through a big-M pair of
rows.  Branch and bound tries both sides and keeps the cheaper one.
"""
import numpy as np

from istc_planner.miqp import MIQPProblem, solve_miqp
from istc_planner.qp import QPProblem

GAP, BIG_M = 2.0, 100.0

# z = (p1, p2, d); cost (p1 - 1)^2 + (p2 - 1.5)^2
Q = np.diag([2.0, 2.0, 0.0])
c = np.array([-2.0, -3.0, 0.0])
# d = 0: p2 - p1 >= GAP, d = 1: p1 - p2 >= GAP
A = np.array([[1.0, -1.0, -BIG_M],
              [-1.0, 1.0, BIG_M]])
b = np.array([-GAP, BIG_M - GAP])
lb = np.array([-10.0, -10.0, 0.0])
ub = np.array([10.0, 10.0, 1.0])

sol = solve_miqp(MIQPProblem(QPProblem(Q, c, A, b, lb, ub), [2]))
p1, p2, d = sol.z
print(f"status {sol.status}, objective {sol.objective + 1 + 2.25:.4f}")
print(f"p1 = {p1:.4f}, p2 = {p2:.4f}, side {int(round(d))}, nodes {sol.stats.get('nodes')}")
