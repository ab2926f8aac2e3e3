"""Adjoint sensitivities checked against finite differences.

One adjoint solve yields the derivative of the outlet objective with respect
to every design value and the inlet pressure drop. Here a handful of those
are compared with central differences, each of which needs two full flow
solves.
"""

import numpy as np

from adjlbm.adjoint import CaseObjective, fd_gradient, param_gradient, solve_adjoint
from adjlbm.collision import solve_fixed_point
from adjlbm.config import build_case, parse_config

case = build_case(parse_config("preset:gradcheck"))
f, _ = solve_fixed_point(case.initial_state(), case.design, case.model, case.tags, tol=1e-12, max_iter=400_000)
v, record = solve_adjoint(f, case.design, case.model, case.tags, case.objective, tol=1e-12, max_iter=400_000)
grad = param_gradient(v, f, case.design, case.model, case.tags)
print(f"adjoint converged in {record.summary['iterations']} steps, |grad| = {grad.norm:.4e}")

# The reference solves are run tighter than the adjoint pipeline, because
# a difference quotient divides their stopping error by the step.
oracle = CaseObjective(case, f, tol=1e-14, max_iter=400_000)
n = len(grad.design)
components = [0, n // 3, 2 * n // 3, n]  # the last one is the pressure drop
fd = fd_gradient(oracle, oracle.vector(), components, [1e-5, 1e-6, 1e-7])
adj = grad.as_array()[components]
for c, a, rows in zip(components, adj, fd.T):
    name = "inlet_dp" if c == n else f"w[{c}]"
    err = np.min(np.abs(rows - a) / abs(a))
    print(f"{name:>9}: adjoint {a: .10e}   best FD {rows[np.argmin(np.abs(rows - a))]: .10e}   rel. error {err:.1e}")
