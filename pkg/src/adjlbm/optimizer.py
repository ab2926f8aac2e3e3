"""Design-update loops: one-shot steepest ascent and the Method of Moving Asymptotes.

Both loops maximise ``F(w) - weight * P(w)`` over the design-region values of
``w``; all iteration counts are primal (and adjoint) lattice steps so that the
two strategies can be compared on cost.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .adjoint import Linearization, adjoint_step, param_gradient, solve_adjoint
from .collision import primal_step, solve_fixed_point
from .errors import ConfigurationError, DivergenceError
from .objective import PenaltySchedule, evaluate, outlet_report, raw_objective
from .records import RunRecord
from .topology import DesignField, design_histogram, penalty

log = logging.getLogger(__name__)


def descent_update(alpha, grad, zeta, bounds=(0.0, 1.0)):
    """Ascent step ``clip(alpha + zeta * grad, lo, hi)``."""
    alpha = np.asarray(alpha, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if alpha.shape != grad.shape:
        raise ValueError(f"design {alpha.shape} and gradient {grad.shape} differ in shape")
    return np.clip(alpha + zeta * grad, bounds[0], bounds[1])


# ---------------------------------------------------------------------------
# one-shot
# ---------------------------------------------------------------------------


@dataclass
class OneShotConfig:
    """Staged step size and run length for :func:`one_shot_run`.

    ``zeta`` is either a constant or a list of ``(start_iteration, value)``
    stages; the value of the last stage whose start is reached applies.
    """

    zeta: float | list = 1.0
    total_iterations: int = 10_000
    penalty: PenaltySchedule = field(default_factory=PenaltySchedule)
    snapshot_interval: int = 100
    normalize: bool = False
    snapshot_callback: object = None

    def __post_init__(self):
        stages = self.stages()
        if any(z < 0 for _, z in stages):
            raise ConfigurationError("zeta must be non-negative")
        if self.total_iterations < 0:
            raise ConfigurationError("total_iterations must be non-negative")
        if self.snapshot_interval <= 0:
            raise ConfigurationError("snapshot_interval must be positive")

    def stages(self):
        if np.ndim(self.zeta) == 0:
            return [(0, float(self.zeta))]
        stages = sorted((int(s), float(z)) for s, z in self.zeta)
        if not stages or stages[0][0] != 0:
            raise ConfigurationError("the first zeta stage must start at iteration 0")
        return stages

    def zeta_at(self, iteration):
        value = 0.0
        for start, z in self.stages():
            if iteration >= start:
                value = z
        return value


def one_shot_run(case, config: OneShotConfig, f0=None, v0=None, record: RunRecord | None = None):
    """Interleave one primal step, one adjoint step and one design update per iteration.

    The adjoint is linearised around the evolving primal state, so the
    gradient is the present estimate rather than an exact sensitivity; the
    design nevertheless settles as all three iterations converge together.
    Returns ``(design, record, f, v)``.
    """
    record = record if record is not None else RunRecord()
    model, tags, spec = case.model, case.tags, case.objective
    design = case.design.copy()
    nodes = np.flatnonzero(design.mask)
    f = case.initial_state() if f0 is None else np.array(f0, dtype=float)
    v = np.zeros_like(f) if v0 is None else np.array(v0, dtype=float)
    t0 = time.perf_counter()
    for it in range(config.total_iterations):
        f_new = primal_step(f, design, model, tags, iteration=it)
        lin = Linearization(f, design, model, tags)
        v, gv = adjoint_step(v, f, design, model, tags, spec, linearization=lin, return_gradient=True)
        weight = config.penalty(it)
        grad = gv.design
        if weight:
            grad = grad - weight * penalty(design)[1][nodes]
        zeta = config.zeta_at(it)
        step = grad
        if config.normalize:
            scale = np.max(np.abs(grad))
            step = grad / scale if scale > 0 else grad
        if zeta:
            design.w[nodes] = descent_update(design.w[nodes], step, zeta)
        if (it + 1) % config.snapshot_interval == 0 or it + 1 == config.total_iterations:
            _log_snapshot(record, it, f, design, spec, model, weight, grad, f_new, zeta)
            if config.snapshot_callback is not None:
                config.snapshot_callback(it, design, f_new, v)
        f = f_new
    record.converged = True
    record.summary.update(
        iterations=config.total_iterations,
        primal_iterations=config.total_iterations,
        adjoint_iterations=config.total_iterations,
        seconds=time.perf_counter() - t0,
    )
    if len(record):
        record.summary["objective"] = record.last("objective")
    return design, record, f, v


def _log_snapshot(record, it, f, design, spec, model, weight, grad, f_new, zeta):
    raw = raw_objective(spec, f, model)
    pen = penalty(design)[0]
    hist = design_histogram(design)
    record.log(
        it,
        objective=raw,
        penalty=pen,
        weight=weight,
        composite=raw - weight * pen,
        grad_norm=float(np.linalg.norm(grad)),
        residual=float(np.max(np.abs(f_new - f))),
        zeta=zeta,
        intermediate=hist["(0,0.9)"],
    )


# ---------------------------------------------------------------------------
# MMA
# ---------------------------------------------------------------------------


@dataclass
class MMAState:
    """Asymptotes and iterate history of the Method of Moving Asymptotes.

    ``asyinit``, ``asyincr`` and ``asydecr`` are the classical initial
    distance (fraction of the variable range) and expansion / contraction
    factors; ``move`` is the move limit as a fraction of the range.
    ``asymin`` is the closest an asymptote may come to the iterate; the
    common choice of 0.01 leaves a limit cycle of that amplitude on smooth
    problems, so the default lets contraction continue much further.
    """

    n: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    x1: np.ndarray | None = None
    x2: np.ndarray | None = None
    move: float = 0.5
    asyinit: float = 0.5
    asyincr: float = 1.2
    asydecr: float = 0.7
    raa0: float = 1e-5
    albefa: float = 0.1
    asymin: float = 1e-6
    iteration: int = 0

    def __post_init__(self):
        if not 0 < self.move <= 1:
            raise ConfigurationError("MMA move limit must lie in (0, 1]")
        if not (self.asydecr < 1 < self.asyincr) or not 0 < self.asyinit:
            raise ConfigurationError("MMA asymptote factors need asydecr < 1 < asyincr")


class MMASubproblemError(ArithmeticError):
    """The convex subproblem has an empty feasible interval."""


def mma_update(alpha, objective_value, grad, state: MMAState, bounds=(0.0, 1.0)):
    """One MMA iteration for maximising an objective with gradient ``grad``.

    The problem is recast as minimising ``-F``; each variable gets the convex
    approximation ``p / (U - x) + q / (x - L)`` whose minimiser on the move
    interval has the closed form ``(sqrt(p) L + sqrt(q) U) / (sqrt(p) + sqrt(q))``.
    The regularisation is proportional to ``max |grad|`` so that scaling the
    objective leaves the accepted iterate unchanged.  ``objective_value`` is
    recorded for diagnostics only (the unconstrained update does not need it).
    """
    x = np.asarray(alpha, dtype=float)
    g = -np.asarray(grad, dtype=float)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), x.shape) for b in bounds)
    if x.shape != g.shape:
        raise ValueError("design and gradient differ in shape")
    if not np.all(np.isfinite(g)):
        raise MMASubproblemError(f"non-finite gradient entries at {np.flatnonzero(~np.isfinite(g))[:5]}")
    span = hi - lo
    if np.any(span <= 0):
        raise MMASubproblemError("empty bound interval")

    k = state.iteration
    if k < 2 or state.x1 is None or state.x2 is None:
        L = x - state.asyinit * span
        U = x + state.asyinit * span
    else:
        trend = (x - state.x1) * (state.x1 - state.x2)
        gamma = np.where(trend > 0, state.asyincr, np.where(trend < 0, state.asydecr, 1.0))
        L = x - gamma * (state.x1 - state.lower)
        U = x + gamma * (state.upper - state.x1)
        L = np.clip(L, x - 10.0 * span, x - state.asymin * span)
        U = np.clip(U, x + state.asymin * span, x + 10.0 * span)

    a = np.maximum.reduce([lo, L + state.albefa * (x - L), x - state.move * span])
    b = np.minimum.reduce([hi, U - state.albefa * (U - x), x + state.move * span])
    if np.any(a > b):
        bad = np.flatnonzero(a > b)[:5]
        raise MMASubproblemError(f"infeasible move interval at variables {bad}: {a[bad]} > {b[bad]}")

    reg = state.raa0 * float(np.max(np.abs(g))) / span
    gp = np.maximum(g, 0.0)
    gm = np.maximum(-g, 0.0)
    p = (U - x) ** 2 * (1.001 * gp + 0.001 * gm + reg)
    q = (x - L) ** 2 * (0.001 * gp + 1.001 * gm + reg)
    sp, sq = np.sqrt(p), np.sqrt(q)
    denom = sp + sq
    with np.errstate(invalid="ignore", divide="ignore"):
        x_new = np.where(denom > 0, (sp * L + sq * U) / denom, x)
    x_new = np.clip(x_new, a, b)

    state.x2 = state.x1
    state.x1 = x.copy()
    state.lower, state.upper = L, U
    state.iteration = k + 1
    return x_new, state


@dataclass
class MMAConfig:
    """Outer-loop settings for :func:`mma_run`.

    ``adjoint_mode="equal"`` runs the adjoint for as many iterations as the
    primal solve took; ``"tol"`` iterates it to ``tol`` instead.  The loop
    ends early once the largest design change drops to ``stop_change``, the
    primal total reaches ``max_total_inner`` or the objective reaches
    ``stop_objective``.
    """

    outer_iterations: int = 20
    tol: float = 1e-8
    max_inner: int = 200_000
    adjoint_mode: str = "equal"
    move: float = 0.2
    penalty: PenaltySchedule = field(default_factory=PenaltySchedule)
    stop_change: float = 0.0
    max_total_inner: int | None = None
    stop_objective: float | None = None

    def __post_init__(self):
        if self.outer_iterations < 0:
            raise ConfigurationError("outer_iterations must be non-negative")
        if self.adjoint_mode not in ("equal", "tol"):
            raise ConfigurationError(f"unknown adjoint_mode {self.adjoint_mode!r}")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")


def mma_run(case, config: MMAConfig, f0=None, record: RunRecord | None = None):
    """Nested loop: converge primal, run adjoint, evaluate gradient, MMA update.

    Each row of the record is one outer iteration and carries the inner
    iteration counts of that iteration; ``summary["primal_iterations"]`` is
    the grand total.  The penalty schedule is indexed by cumulative primal
    iterations so that it is comparable with the one-shot loop.  Returns
    ``(design, record, f)``.
    """
    record = record if record is not None else RunRecord()
    model, tags, spec = case.model, case.tags, case.objective
    design = case.design.copy()
    nodes = np.flatnonzero(design.mask)
    state = MMAState(len(nodes), move=config.move)
    f = case.initial_state() if f0 is None else np.array(f0, dtype=float)
    total_primal = total_adjoint = 0
    t0 = time.perf_counter()
    v = None
    for outer in range(config.outer_iterations + 1):
        f, prec = solve_fixed_point(f, design, model, tags, tol=config.tol, max_iter=config.max_inner, log_every=0)
        n_primal = prec.summary["iterations"]
        total_primal += n_primal
        weight = config.penalty(total_primal)
        raw = raw_objective(spec, f, model)
        pen = penalty(design)[0]
        reached = config.stop_objective is not None and raw >= config.stop_objective
        if outer == config.outer_iterations or reached:
            record.log(outer, objective=raw, penalty=pen, weight=weight, composite=raw - weight * pen,
                       primal_iterations=n_primal, adjoint_iterations=0, total_inner=total_primal + total_adjoint)
            break
        lin = Linearization(f, design, model, tags)
        if config.adjoint_mode == "equal":
            v, arec = solve_adjoint(f, design, model, tags, spec, fixed_iterations=max(n_primal, 1), v0=v, log_every=0, cache=True)
        else:
            v, arec = solve_adjoint(f, design, model, tags, spec, tol=config.tol, max_iter=config.max_inner, v0=v, log_every=0, cache=True)
        n_adj = arec.summary["iterations"]
        total_adjoint += n_adj
        gv = param_gradient(v, f, design, model, tags, penalty_weight=weight, linearization=lin)
        x_old = design.w[nodes].copy()
        x_new, state = mma_update(x_old, raw - weight * pen, gv.design, state)
        design.w[nodes] = x_new
        change = float(np.max(np.abs(x_new - x_old))) if len(nodes) else 0.0
        record.log(
            outer,
            objective=raw,
            penalty=pen,
            weight=weight,
            composite=raw - weight * pen,
            grad_norm=float(np.linalg.norm(gv.design)),
            change=change,
            primal_iterations=n_primal,
            adjoint_iterations=n_adj,
            total_inner=total_primal + total_adjoint,
            primal_converged=float(prec.converged),
        )
        log.info("MMA outer %d: objective %.6g, change %.3g, inner %d", outer, raw, change, n_primal)
        if change <= config.stop_change:
            break
        if config.max_total_inner is not None and total_primal >= config.max_total_inner:
            break
    record.converged = True
    record.summary.update(
        outer_iterations=outer,
        primal_iterations=total_primal,
        adjoint_iterations=total_adjoint,
        iterations=total_primal,
        objective=record.last("objective"),
        seconds=time.perf_counter() - t0,
    )
    return design, record, f


def report(case, f, design):
    """Objective, penalty and outlet statistics of a converged state."""
    spec, model = case.objective, case.model
    out = {"objective": raw_objective(spec, f, model), "penalty": penalty(design)[0]}
    out.update(outlet_report(spec, f, model))
    out.update({f"fraction {k}": v for k, v in design_histogram(design).items()})
    out["composite"] = evaluate(spec, f, design, model)
    return out


__all__ = [
    "descent_update",
    "OneShotConfig",
    "one_shot_run",
    "MMAState",
    "MMAConfig",
    "MMASubproblemError",
    "mma_update",
    "mma_run",
    "report",
    "DivergenceError",
    "DesignField",
]
