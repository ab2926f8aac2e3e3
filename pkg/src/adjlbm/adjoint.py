"""Adjoint lattice Boltzmann: reverse streaming with transposed collision Jacobians.

The adjoint iteration is

    v_k^{n+1}(x - e_k) = sum_j v_j^n(x) dW_j^x/df_k(f_hat(x)) + dF^x/df_k(f_hat(x))

and, once converged, ``dF/dalpha = sum_{x,j} v_j(x) dW_j^x/dalpha``.  The
vector-Jacobian products are taken by reverse-mode differentiation of the very
kernels the primal solver runs (:mod:`adjlbm.collision`), so primal and
adjoint cannot drift apart.  A forward-mode route (full local Jacobians from
dual numbers) and a tangent-linear solver are provided as independent checks.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .collision import ModelSpec, _Heater, _Interior, _Pressure, _Wall, _w_array, plan_for, solve_fixed_point
from .errors import ConfigurationError, ConvergenceError, DivergenceError
from .lattice import NodeTag, NodeTagMap, pairwise_sum, reverse_stream, stream
from .objective import ObjectiveSpec, evaluate, objective_partials
from .records import RunRecord
from .topology import DesignField, penalty

GLOBAL_PARAMETERS = ("inlet_dp",)


@dataclass
class GradientVector:
    """``dF/dw`` on the design nodes plus named global-parameter derivatives."""

    design_nodes: np.ndarray
    design: np.ndarray
    globals: dict = field(default_factory=dict)

    def as_array(self):
        return np.concatenate([self.design, [self.globals[k] for k in sorted(self.globals)]])

    def full(self, n_nodes):
        out = np.zeros(n_nodes)
        out[self.design_nodes] = self.design
        return out

    @property
    def norm(self):
        return float(np.sqrt(np.sum(self.as_array() ** 2)))


# ---------------------------------------------------------------------------
# linearisation of the collision around a state
# ---------------------------------------------------------------------------


class Linearization:
    """Transposed collision Jacobian of every node group at a fixed state ``f``.

    ``vjp(v)`` returns ``(J^T v, dW/dw^T v, dW/d(inlet_dp)^T v)``.  Interior,
    wall and heater groups use hand-derived products that recompute their few
    intermediates on each call; the remaining groups (pressure boundaries) are
    swept on a reverse-mode tape built once here.  ``taped=True`` forces the
    tape for every group, which the tests use as the reference.
    """

    def __init__(self, f, design, model: ModelSpec, tags: NodeTagMap, taped=False):
        self.model = model
        self.tags = tags
        self.n = f.shape[1]
        w = _w_array(design, self.n)
        self.groups = []
        for grp in plan_for(model, tags).groups:
            idx = grp.idx
            if not taped and hasattr(grp, "vjp"):
                Fv = np.ascontiguousarray(f[:, idx])
                if not np.isfinite(Fv).all():
                    raise DivergenceError(f"non-finite state in {grp.tag.name} group")
                self.groups.append((idx, grp, Fv, w[idx] if grp.uses_w else None))
                continue
            F = ad.Var(f[:, idx])
            W = ad.Var(w[idx]) if grp.uses_w else None
            DP = ad.Var(model.inlet_dp) if grp.uses_dp else None
            out = grp(F, W, DP)
            if not np.isfinite(out.value).all():
                raise DivergenceError(f"non-finite collision output in {grp.tag.name} group")
            self.groups.append((idx, F, W, DP, out, ad.tape_order(out)))

    def vjp(self, v):
        grad_f = np.empty_like(v)
        grad_w = np.zeros(self.n)
        grad_dp = 0.0
        for entry in self.groups:
            if len(entry) == 4:
                idx, grp, Fv, wv = entry
                gf, gw = grp.vjp(Fv, wv, v[:, idx])
                grad_f[:, idx] = gf
                if gw is not None:
                    grad_w[idx] = gw
                continue
            idx, F, W, DP, out, order = entry
            for leaf in (F, W, DP):
                if leaf is not None:
                    leaf.grad = None
            out.backward(v[:, idx], order=order)
            grad_f[:, idx] = 0.0 if F.grad is None else F.grad
            if W is not None and W.grad is not None:
                grad_w[idx] = W.grad
            if DP is not None and DP.grad is not None:
                grad_dp += float(np.sum(DP.grad))
        return grad_f, grad_w, grad_dp


def local_jacobian(f, design, model: ModelSpec, tags: NodeTagMap):
    """Per-node Jacobians ``J[j, k, x] = dW_j^x/df_k`` by forward-mode dual numbers."""
    n = f.shape[1]
    w = _w_array(design, n)
    J = np.zeros((f.shape[0], f.shape[0], n))
    for grp in plan_for(model, tags).groups:
        idx = grp.idx
        J[:, :, idx] = ad.jacobian(lambda F, g=grp, i=idx: g(F, w[i] if g.uses_w else None), f[:, idx])
    return J


def node_collision_generic(tag, F, w, model: ModelSpec, normal=(1, 0, 0), temperature=None, rho_outlet=1.0):
    """Single-tag collision of the columns of ``F`` that also accepts AD values.

    ``F`` has shape ``(M, n)``; ``w`` is a scalar, an ``(n,)`` array or an AD
    value of that shape (ignored for non-interior tags).
    """
    n = F.shape[1]
    idx = np.arange(n)
    tag = NodeTag(tag)
    if tag == NodeTag.INTERIOR:
        if not isinstance(w, (ad.Var, ad.Dual)):
            w = np.broadcast_to(np.asarray(1.0 if w is None else w, dtype=float), (n,))
        return _Interior(model, idx)(F, w)
    if tag == NodeTag.WALL:
        return _Wall(model, idx)(F)
    if tag == NodeTag.HEATER:
        return _Heater(model, idx, np.full(n, 1.0 if temperature is None else float(temperature)))(F)
    inlet = tag == NodeTag.PRESSURE_INLET
    temp = np.full(n, float(temperature)) if inlet and temperature is not None else None
    return _Pressure(model, idx, normal, inlet, temp, rho_outlet)(F)


def adjoint_collide(tag, f_hat_local, w, v_local, model: ModelSpec, objective_partial=None, **node):
    """``sum_j v_j dW_j/df_k + dF/df_k`` for same-tag nodes, columns of ``f_hat_local``.

    ``node`` forwards ``normal``, ``temperature`` and ``rho_outlet`` to the
    collision kernel.
    """
    F = np.asarray(f_hat_local, dtype=float)
    V = np.asarray(v_local, dtype=float)
    single = F.ndim == 1
    if single:
        F, V = F[:, None], V[:, None]
    _, (gF,) = ad.vjp(lambda X: node_collision_generic(tag, X, w, model, **node), (F,), V)
    if not np.isfinite(gF).all():
        raise DivergenceError("non-finite adjoint collision")
    if objective_partial is not None:
        gF = gF + np.reshape(objective_partial, gF.shape)
    return gF[:, 0] if single else gF


# ---------------------------------------------------------------------------
# adjoint iteration
# ---------------------------------------------------------------------------


def adjoint_step(
    v,
    f_hat,
    design,
    model: ModelSpec,
    tags: NodeTagMap,
    objective: ObjectiveSpec | None,
    linearization: Linearization | None = None,
    partials=None,
    method="reverse",
    return_gradient=False,
):
    """One adjoint step: local transposed collision, then reverse streaming.

    ``linearization`` reuses tapes built at ``f_hat`` (frozen primal state);
    otherwise they are rebuilt.  ``method="forward"`` assembles full local
    Jacobians with dual numbers instead (slower; used as a cross-check).
    With ``return_gradient`` the same sweep also yields the current estimate
    of ``dF/dalpha``.
    """
    if partials is None:
        partials = np.zeros_like(f_hat) if objective is None else objective_partials(objective, f_hat, model)
    if method == "forward":
        J = local_jacobian(f_hat, design, model, tags)
        pre = np.einsum("jkx,jx->kx", J, v) + partials
        grad_w, grad_dp = None, None
    else:
        lin = linearization or Linearization(f_hat, design, model, tags)
        pre, grad_w, grad_dp = lin.vjp(v)
        pre += partials
    out = reverse_stream(pre, model.velocities, tags.shape)
    if not np.isfinite(out).all():
        raise DivergenceError("non-finite adjoint densities")
    if return_gradient:
        if grad_w is None:
            raise ConfigurationError("gradient estimate requires the reverse method")
        return out, _gradient_vector(design, grad_w, grad_dp, f_hat.shape[1])
    return out


def _gradient_vector(design, grad_w, grad_dp, n):
    nodes = np.flatnonzero(design.mask) if design is not None else np.zeros(0, dtype=np.int64)
    return GradientVector(nodes, grad_w[nodes].copy(), {"inlet_dp": float(grad_dp)})


def solve_adjoint(
    f_hat,
    design,
    model: ModelSpec,
    tags: NodeTagMap,
    objective: ObjectiveSpec,
    tol=1e-10,
    max_iter=100_000,
    v0=None,
    fixed_iterations=None,
    cache=False,
    record: RunRecord | None = None,
    log_every=1,
):
    """Iterate :func:`adjoint_step` from ``v = 0`` (or ``v0``) to a fixed point.

    Stops when ``max |v_{n+1} - v_n| < tol``, or after exactly
    ``fixed_iterations`` steps when given (equal-count mode).  The returned
    record's ``summary["residual"]`` is the last update norm, i.e. the
    fixed-point residual of the adjoint equation.  By default the collision
    is re-linearised at every step; ``cache=True`` keeps one linearisation of
    the frozen ``f_hat`` for the whole solve (less work per step).
    """
    record = record if record is not None else RunRecord()
    v = np.zeros_like(f_hat) if v0 is None else np.array(v0, dtype=float)
    partials = objective_partials(objective, f_hat, model)
    lin = Linearization(f_hat, design, model, tags) if cache else None
    limit = fixed_iterations if fixed_iterations is not None else max_iter
    t0 = time.perf_counter()
    it = 0
    res = np.inf
    converged = False
    while it < limit:
        new = adjoint_step(v, f_hat, design, model, tags, objective, linearization=lin, partials=partials)
        res = float(np.max(np.abs(new - v)))
        v = new
        it += 1
        if log_every and (it % log_every == 0 or res < tol):
            record.log(it - 1, adj_residual=res)
        if fixed_iterations is None and res < tol:
            converged = True
            break
    if fixed_iterations is not None:
        converged = res < tol
    record.converged = converged
    record.summary.update(iterations=it, residual=res, seconds=time.perf_counter() - t0)
    return v, record


def param_gradient(
    v_hat,
    f_hat,
    design,
    model: ModelSpec,
    tags: NodeTagMap,
    penalty_weight=0.0,
    linearization: Linearization | None = None,
) -> GradientVector:
    """``dF/dalpha = sum_{x,j} v_j(x) dW_j^x/dalpha`` for design nodes and globals.

    With a non-zero ``penalty_weight`` the direct ``-weight * dP/dw`` term is
    added to the design components.
    """
    lin = linearization or Linearization(f_hat, design, model, tags)
    _, grad_w, grad_dp = lin.vjp(v_hat)
    gv = _gradient_vector(design, grad_w, grad_dp, f_hat.shape[1])
    if penalty_weight and design is not None:
        gv.design = gv.design - penalty_weight * penalty(design)[1][gv.design_nodes]
    return gv


# ---------------------------------------------------------------------------
# tangent-linear mode
# ---------------------------------------------------------------------------


@dataclass
class ParameterDirection:
    """Perturbation direction: ``dw`` per node (zero off the mask) and global changes."""

    dw: np.ndarray
    globals: dict = field(default_factory=dict)

    @classmethod
    def from_vector(cls, gv_like: GradientVector, vec, n_nodes):
        dw = np.zeros(n_nodes)
        k = len(gv_like.design_nodes)
        dw[gv_like.design_nodes] = vec[:k]
        names = sorted(gv_like.globals)
        return cls(dw, {name: float(vec[k + i]) for i, name in enumerate(names)})

    def dot(self, gv: GradientVector):
        return float(
            np.dot(self.dw[gv.design_nodes], gv.design)
            + sum(self.globals.get(k, 0.0) * v for k, v in gv.globals.items())
        )


def tangent_step(df, f_hat, dalpha: ParameterDirection, design, model: ModelSpec, tags: NodeTagMap):
    """``df_j^{n+1}(x + e_j) = sum_k dW_j/df_k df_k(x) + dW_j/dalpha . dalpha``."""
    n = f_hat.shape[1]
    w = _w_array(design, n)
    ddp = dalpha.globals.get("inlet_dp", 0.0)
    post = np.empty_like(f_hat)
    for grp in plan_for(model, tags).groups:
        idx = grp.idx
        F = ad.Dual(f_hat[:, idx], df[None, :, idx])
        W = ad.Dual(w[idx], dalpha.dw[None, idx]) if grp.uses_w else None
        DP = ad.Dual(model.inlet_dp, np.array([ddp])) if grp.uses_dp else None
        out = grp(F, W, DP)
        post[:, idx] = out.tangent[0] if isinstance(out, ad.Dual) else 0.0
    out = stream(post, model.velocities, tags.shape)
    if not np.isfinite(out).all():
        raise DivergenceError("non-finite tangent densities")
    return out


def solve_tangent(
    f_hat,
    dalpha: ParameterDirection,
    design,
    model: ModelSpec,
    tags: NodeTagMap,
    objective: ObjectiveSpec,
    tol=1e-12,
    max_iter=100_000,
    cache=False,
):
    """Converged tangent ``df`` and the directional derivative ``dF = dF/df . df``.

    The recurrence is affine in ``df``, so ``cache=True`` assembles the local
    Jacobians once and adds the constant parameter drive at every step,
    which is much cheaper than re-running the dual-number collision.
    """
    df = np.zeros_like(f_hat)
    if cache:
        J = local_jacobian(f_hat, design, model, tags)
        drive = tangent_step(df, f_hat, dalpha, design, model, tags)

        def step(d):
            out = stream(np.einsum("jkx,kx->jx", J, d), model.velocities, tags.shape) + drive
            if not np.isfinite(out).all():
                raise DivergenceError("non-finite tangent densities")
            return out
    else:

        def step(d):
            return tangent_step(d, f_hat, dalpha, design, model, tags)

    res = np.inf
    it = 0
    while it < max_iter:
        new = step(df)
        res = float(np.max(np.abs(new - df)))
        df = new
        it += 1
        if res < tol:
            break
    partials = objective_partials(objective, f_hat, model)
    dF = pairwise_sum(partials * df)
    return df, dF, {"iterations": it, "residual": res, "converged": res < tol}


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def fd_gradient(objective_fn, x0, components, step=1e-6):
    """Central differences ``(F(x + h e_i) - F(x - h e_i)) / 2h`` for each component.

    ``objective_fn`` maps a parameter vector to a scalar (normally a full
    fixed-point solve); ``step`` may be a scalar or a sequence, in which case
    the result has one row per step.
    """
    if np.ndim(step) == 0:
        return fd_gradient(objective_fn, x0, components, [step])[0]
    x0 = np.asarray(x0, dtype=float)
    out = np.empty((len(step), len(components)))
    for s, h in enumerate(step):
        if not h > 0:
            raise ValueError("finite-difference step must be positive")
        for c, i in enumerate(components):
            xp = x0.copy()
            xm = x0.copy()
            xp[i] += h
            xm[i] -= h
            out[s, c] = (objective_fn(xp) - objective_fn(xm)) / (2.0 * h)
    return out


class CaseObjective:
    """Parameter vector ``[w on design nodes..., inlet_dp]`` to converged objective.

    Each call solves the primal fixed point, warm-started from ``f_start``.
    """

    def __init__(self, case, f_start, tol=1e-14, max_iter=200_000, penalty_weight=0.0):
        self.case = case
        self.f_start = f_start
        self.tol = tol
        self.max_iter = max_iter
        self.penalty_weight = penalty_weight
        self.nodes = case.design_nodes
        self.solves = 0

    def vector(self, design=None, model=None):
        design = design or self.case.design
        model = model or self.case.model
        return np.concatenate([design.w[self.nodes], [model.inlet_dp]])

    def unpack(self, x):
        w = self.case.design.w.copy()
        w[self.nodes] = x[: len(self.nodes)]
        design = DesignField(w, self.case.design.mask)
        model = self.case.model
        if x[-1] != model.inlet_dp:
            model = dataclasses.replace(model, inlet_dp=float(x[-1]))
        return design, model

    def __call__(self, x):
        design, model = self.unpack(np.asarray(x, dtype=float))
        f, rec = solve_fixed_point(
            self.f_start, design, model, self.case.tags, tol=self.tol, max_iter=self.max_iter, log_every=0
        )
        self.solves += 1
        if not rec.converged:
            raise ConvergenceError(f"perturbed primal solve did not converge (residual {rec.summary['residual']:.3g})")
        return evaluate(self.case.objective, f, design, model, penalty_weight=self.penalty_weight)
