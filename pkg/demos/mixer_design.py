"""One-shot topology optimisation of the desk-scale mixer.

Two streams at temperatures -1 and +1 enter the channel side by side. The
objective rewards flux that leaves well mixed, so the optimiser has to trade
flow rate against stirring obstacles. Primal, adjoint and design advance
together, one step each per iteration.

Pass a smaller iteration count as the first argument for a quick look.
"""

import sys

import numpy as np

from adjlbm.collision import solve_fixed_point
from adjlbm.config import build_case, parse_config, penalty_schedule
from adjlbm.objective import raw_objective
from adjlbm.optimizer import OneShotConfig, one_shot_run
from adjlbm.topology import DesignField, apply_threshold, design_histogram

cfg = parse_config("preset:mixer2d")
case = build_case(cfg)
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else cfg.optimizer.iterations


def converged_objective(design, f0):
    f, _ = solve_fixed_point(f0, design, case.model, case.tags, tol=1e-10, max_iter=400_000, log_every=0)
    return raw_objective(case.objective, f, case.model)


empty = converged_objective(DesignField.uniform(case.design.mask, 1.0), case.initial_state())
print(f"empty channel objective {empty:.5f}")

config = OneShotConfig(
    zeta=cfg.optimizer.zeta,
    total_iterations=iterations,
    penalty=penalty_schedule(cfg),
    snapshot_interval=max(iterations // 20, 1),
    normalize=cfg.optimizer.normalize,
)
design, record, f, _ = one_shot_run(case, config)
for it, obj in zip(record.column("iter"), record.column("objective")):
    print(f"  iteration {it:6d}   objective {obj:.5f}")

best = converged_objective(design, f)
print(f"optimised {best:.5f}, {best / empty:.2f} times the empty channel")
print("design histogram", {k: round(v, 3) for k, v in design_histogram(design).items()})
for eta in (0.3, 0.5, 0.7):
    print(f"  threshold {eta}: {converged_objective(apply_threshold(design, eta), f):.5f}")

w = design.w.reshape(case.shape.Ly, case.shape.Lx)
for row in w[::-1]:
    print("".join("#" if v < 0.1 else ("+" if v < 0.9 else ".") for v in row))
np.save("mixer_design.npy", design.w)
