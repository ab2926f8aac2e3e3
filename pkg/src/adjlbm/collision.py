"""Node-local collision operators and the primal fixed-point driver.

Every kernel here is written against the operator surface of
:mod:`adjlbm.autodiff`, so it evaluates on numpy arrays (primal), on
:class:`~adjlbm.autodiff.Dual` (tangent) and on :class:`~adjlbm.autodiff.Var`
(adjoint) without change.  Kernels act column-wise: ``F`` has shape
``(M, n)`` for ``n`` nodes of one group.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DivergenceError
from .lattice import LatticeDescriptor, LatticeShape, NodeTag, NodeTagMap, descriptor, stream
from .records import RunRecord
from .topology import DEFAULT_SWITCHING, Switching, diffusivity

# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RelaxationSpec:
    """BGK rate ``omega`` or the diagonal of MRT relaxation factors."""

    omega: float
    diagonal: np.ndarray | None = None
    mode: str = "MRT"

    def __post_init__(self):
        if not 0.0 < self.omega < 2.0:
            raise ConfigurationError(f"relaxation rate omega={self.omega} outside (0, 2)")
        if self.mode not in ("MRT", "BGK"):
            raise ConfigurationError(f"unknown collision mode {self.mode!r}")
        if self.diagonal is not None:
            d = np.asarray(self.diagonal, dtype=float)
            if np.any(d <= 0.0) or np.any(d >= 2.0):
                raise ConfigurationError("MRT relaxation factors must lie in (0, 2)")
            object.__setattr__(self, "diagonal", d)

    @classmethod
    def from_viscosity(cls, nu, lattice: LatticeDescriptor, mode="MRT", ghost=1.0):
        omega = omega_from_viscosity(nu)
        if mode == "BGK" or lattice.moment_matrix is None:
            return cls(omega, None, "BGK")
        diag = np.full(lattice.q, float(ghost))
        diag[list(lattice.shear_moments)] = omega
        return cls(omega, diag, "MRT")

    def operator(self, lattice: LatticeDescriptor):
        """``A = U^-1 (I - T) U``: the linear part of the collision."""
        if self.mode == "BGK":
            return (1.0 - self.omega) * np.eye(lattice.q)
        U = lattice.moment_matrix
        return np.linalg.solve(U, (1.0 - self.diagonal)[:, None] * U)


def omega_from_viscosity(nu):
    """Relaxation rate for kinematic viscosity ``nu``: ``1/omega = 0.5 + 3 nu``."""
    return 1.0 / (0.5 + 3.0 * nu)


def viscosity_from_omega(omega):
    return (1.0 / omega - 0.5) / 3.0


@dataclass(eq=False)
class ModelSpec:
    """Coupled flow + passive-scalar model parameters (lattice units)."""

    flow: LatticeDescriptor = field(default_factory=lambda: descriptor("D2Q9"))
    thermal: LatticeDescriptor = field(default_factory=lambda: descriptor("D2Q9"))
    nu: float = 0.02
    beta_fluid: float = 0.003
    beta_solid: float = 0.003
    inlet_dp: float = 0.016666
    u_clamp: float = 0.05
    mode: str = "MRT"
    ghost_relaxation: float = 1.0
    switching: Switching = DEFAULT_SWITCHING
    u_max: float = 0.3

    def __post_init__(self):
        if isinstance(self.flow, str):
            self.flow = descriptor(self.flow)
        if isinstance(self.thermal, str):
            self.thermal = descriptor(self.thermal)
        if not self.nu > 0:
            raise ConfigurationError(f"nu must be positive, got {self.nu}")
        if self.beta_fluid < 0 or self.beta_solid < 0:
            raise ConfigurationError("diffusivities must be non-negative")
        if not self.u_clamp > 0:
            raise ConfigurationError("u_clamp must be positive")
        self.relaxation = RelaxationSpec.from_viscosity(
            self.nu, self.flow, self.mode, self.ghost_relaxation
        )
        self.A = self.relaxation.operator(self.flow)
        dim = max(self.flow.dim, self.thermal.dim)
        self.dim = dim
        self.E = self.flow.velocities[:, :dim].astype(float)
        self.Et = self.thermal.velocities[:, :dim].astype(float)
        self.velocities = np.vstack([self.flow.velocities, self.thermal.velocities])

    @property
    def M(self):
        return self.flow.q + self.thermal.q

    @property
    def omega(self):
        return self.relaxation.omega

    @property
    def inlet_density(self):
        return 1.0 + self.inlet_dp / self.flow.cs2


@dataclass
class MacroState:
    rho: np.ndarray
    u: np.ndarray
    T: np.ndarray


# ---------------------------------------------------------------------------
# elementary operators
# ---------------------------------------------------------------------------


def _velocity_matrix(lattice, dim=None):
    dim = dim or lattice.dim
    return lattice.velocities[:, :dim].astype(float)


def moments(f, lattice: LatticeDescriptor, E=None):
    """Zeroth and first moments: ``rho = sum f``, ``u = sum f e / rho``."""
    E = _velocity_matrix(lattice) if E is None else E
    rho = f.sum(axis=0)
    if not isinstance(rho, (ad.Dual, ad.Var)):
        bad = np.flatnonzero(~(rho > 0))
        if len(bad):
            raise DivergenceError(f"non-positive density at node {bad[0]}", node=int(bad[0]))
    j = ad.matmul(E.T, f)
    return rho, j / rho


def equilibrium_flow(rho, u, lattice: LatticeDescriptor, E=None):
    """Second-order polynomial equilibrium ``w rho (1 + e.u/cs2 + (e.u)^2/(2cs4) - u^2/(2cs2))``."""
    E = _velocity_matrix(lattice) if E is None else E
    cs2 = lattice.cs2
    eu = ad.matmul(E, u)
    usq = (u * u).sum(axis=0)
    w = lattice.weights[:, None]
    return w * (rho * (1.0 + eu * (1.0 / cs2) + (eu * eu) * (0.5 / cs2**2) - usq * (0.5 / cs2)))


def equilibrium_thermal(T, u, lattice: LatticeDescriptor, E=None):
    """Passive-scalar equilibrium ``w T (1 + e.u / cs2)``; its zeroth moment is ``T``."""
    E = _velocity_matrix(lattice) if E is None else E
    eu = ad.matmul(E, u)
    return lattice.weights[:, None] * (T * (1.0 + eu * (1.0 / lattice.cs2)))


def collide_bgk(f, f_eq, omega):
    return f + omega * (f_eq - f)


def collide_fmrt(f, m_eq_pre, m_eq_post, diagonal, U, U_inv=None):
    """``U^-1 (m_eq_post + (I - T)(U f - m_eq_pre))`` with ``T = diag(diagonal)``."""
    if U_inv is None:
        if abs(np.linalg.det(U)) < 1e-12:
            raise ConfigurationError("moment matrix is singular")
        U_inv = np.linalg.inv(U)
    relax = np.asarray(1.0 - np.asarray(diagonal, dtype=float))
    relax = relax[:, None] if relax.ndim == 1 else relax
    m = ad.matmul(U, f)
    return ad.matmul(U_inv, m_eq_post + relax * (m - m_eq_pre))


def apply_forcing(u_pre, w, switching: Switching = DEFAULT_SWITCHING):
    """Darcy switch ``u_post = G(w) u_pre``."""
    return u_pre * switching(w)


def bounce_back(f, lattice: LatticeDescriptor):
    return f[lattice.opposite]


# ---------------------------------------------------------------------------
# Zou-He pressure boundary
# ---------------------------------------------------------------------------


class _ZouHe:
    """Precomputed index algebra for one descriptor and one inward normal."""

    def __init__(self, lattice: LatticeDescriptor, normal, dim):
        n = np.asarray(normal, dtype=np.int64)
        if n.shape != (3,) or np.abs(n).sum() != 1 or np.abs(n).max() != 1:
            raise ConfigurationError(f"pressure boundary normal {tuple(n)} is not axis-aligned")
        if np.flatnonzero(n)[0] >= dim:
            raise ConfigurationError(f"normal {tuple(n)} points out of the {dim}D lattice")
        e = lattice.velocities
        cn = e @ n
        q = lattice.q
        self.lattice = lattice
        self.normal = n[:dim].astype(float)[:, None]
        self.known = np.flatnonzero(cn <= 0)
        self.unknown = np.flatnonzero(cn > 0)
        # s = sum_{e.n=0} f + 2 sum_{e.n<0} f
        self.s_row = ((cn == 0) + 2.0 * (cn < 0))[None, :]
        nu = len(self.unknown)
        self.P_opp = np.zeros((nu, q))
        self.P_opp[np.arange(nu), lattice.opposite[self.unknown]] = 1.0
        self.coef = ((2.0 / lattice.cs2) * lattice.weights[self.unknown] * cn[self.unknown])[:, None]
        self.P_known = np.zeros((q, q))
        self.P_known[self.known, self.known] = 1.0
        self.P_unknown = np.zeros((q, nu))
        self.P_unknown[self.unknown, np.arange(nu)] = 1.0
        self.tangential = []
        for t in range(dim):
            if n[t] != 0:
                continue
            et = e[:, t].astype(float)
            eu = et[self.unknown]
            denom = float(np.sum(eu * eu))
            if denom == 0.0:
                continue
            known_row = np.where(cn <= 0, et, 0.0)[None, :]
            self.tangential.append((known_row, eu[None, :], eu[:, None] / denom))

    def __call__(self, f, rho_target, u_clamp):
        """Reconstruct the unknown densities; returns ``(f_full, rho, u_normal)``."""
        s = ad.matmul(self.s_row, f)[0]
        un = 1.0 - s / rho_target
        un = ad.minimum(un, u_clamp)
        rho = s / (1.0 - un)
        f_unk = ad.matmul(self.P_opp, f) + self.coef * (rho * un)
        for known_row, unk_row, corr in self.tangential:
            mom = ad.matmul(known_row, f) + ad.matmul(unk_row, f_unk)
            f_unk = f_unk - corr * mom
        f_full = ad.matmul(self.P_known, f) + ad.matmul(self.P_unknown, f_unk)
        return f_full, rho, un


def zou_he_pressure(f, rho_target, normal, lattice: LatticeDescriptor, u_clamp=0.05):
    """Zou-He pressure reconstruction on a face with inward ``normal``.

    The normal velocity implied by ``rho_target`` is capped at ``u_clamp``; a
    capped node is reconstructed as a velocity node at the capped value.
    """
    zh = _ZouHe(lattice, normal, lattice.dim)
    f_full, _, _ = zh(f, rho_target, u_clamp)
    return f_full


# ---------------------------------------------------------------------------
# per-group kernels
# ---------------------------------------------------------------------------


class _Group:
    """One vectorised collision kernel applied to a fixed set of nodes."""

    uses_w = False
    uses_dp = False

    def __init__(self, model: ModelSpec, idx):
        self.model = model
        self.idx = idx

    def __call__(self, F, w=None, dp=None):  # pragma: no cover - interface
        raise NotImplementedError


class _Interior(_Group):
    uses_w = True

    def __call__(self, F, w=None, dp=None):
        m = self.model
        qf = m.flow.q
        f, g = F[:qf], F[qf:]
        rho, u = moments(f, m.flow, m.E)
        u_post = u * m.switching(w)
        f_out = equilibrium_flow(rho, u_post, m.flow, m.E) + ad.matmul(
            m.A, f - equilibrium_flow(rho, u, m.flow, m.E)
        )
        T = g.sum(axis=0)
        beta = diffusivity(w, m.beta_fluid, m.beta_solid)
        omega_t = 1.0 / (0.5 + beta * (1.0 / m.thermal.cs2))
        g_out = g + omega_t * (equilibrium_thermal(T, u_post, m.thermal, m.Et) - g)
        return ad.concatenate([f_out, g_out])

    def vjp(self, F, w, cot):
        """Hand-derived ``(dW/dF^T cot, dW/dw^T cot)`` for plain arrays.

        Mirrors :meth:`__call__` step by step in reverse; checked against the
        taped derivative in the test suite.
        """
        m = self.model
        qf = m.flow.q
        f, g = F[:qf], F[qf:]
        a, b = cot[:qf], cot[qf:]
        E, Et = m.E, m.Et
        W = m.flow.weights[:, None]
        Wt = m.thermal.weights[:, None]
        cs2, cs2t = m.flow.cs2, m.thermal.cs2
        rho = f.sum(axis=0)
        u = (E.T @ f) / rho
        G = m.switching(w)
        up = u * G

        def feq_vjp(v, c):
            ev = E @ v
            phi = W * (1.0 + ev / cs2 + ev * ev * (0.5 / cs2**2) - (v * v).sum(axis=0) * (0.5 / cs2))
            wc = W * c
            g_rho = (c * phi).sum(axis=0)
            g_v = rho * (E.T @ wc / cs2 + E.T @ (wc * ev) / cs2**2 - v * (wc.sum(axis=0) / cs2))
            return g_rho, g_v

        c = m.A.T @ a
        g_rho1, g_up = feq_vjp(up, a)
        g_rho2, g_u2 = feq_vjp(u, c)
        T = g.sum(axis=0)
        beta = diffusivity(w, m.beta_fluid, m.beta_solid)
        omega_t = 1.0 / (0.5 + beta / cs2t)
        basis = Wt * (1.0 + (Et @ up) / cs2t)
        g_T = omega_t * (b * basis).sum(axis=0)
        g_up = g_up + (omega_t * T / cs2t) * (Et.T @ (Wt * b))
        g_omega = (b * (basis * T - g)).sum(axis=0)
        g_u = G * g_up - g_u2
        g_G = (g_up * u).sum(axis=0)
        g_rho = g_rho1 - g_rho2 - (g_u * u).sum(axis=0) / rho
        gF = np.empty_like(F)
        gF[:qf] = c + g_rho + E @ (g_u / rho)
        gF[qf:] = (1.0 - omega_t) * b + g_T
        d_omega = -omega_t**2 / cs2t * (m.beta_fluid - m.beta_solid)
        gw = g_G * m.switching.derivative(w) + g_omega * d_omega
        return gF, gw


class _Wall(_Group):
    def __init__(self, model, idx):
        super().__init__(model, idx)
        self.perm = np.concatenate([model.flow.opposite, model.flow.q + model.thermal.opposite])

    def __call__(self, F, w=None, dp=None):
        return F[self.perm]

    def vjp(self, F, w, cot):
        out = np.empty_like(cot)
        out[self.perm] = cot
        return out, None


class _Heater(_Group):
    def __init__(self, model, idx, temperature):
        super().__init__(model, idx)
        self.g = model.thermal.weights[:, None] * temperature[None, :]

    def __call__(self, F, w=None, dp=None):
        m = self.model
        f = F[: m.flow.q]
        return ad.concatenate([f[m.flow.opposite], self.g])

    def vjp(self, F, w, cot):
        qf = self.model.flow.q
        out = np.zeros_like(cot)
        out[self.model.flow.opposite] = cot[:qf]
        return out, None


class _Pressure(_Group):
    def __init__(self, model, idx, normal, inlet, temperature, rho_outlet):
        super().__init__(model, idx)
        self.zh = _ZouHe(model.flow, normal, model.dim)
        self.inlet = inlet
        self.uses_dp = inlet
        self.rho_outlet = rho_outlet
        self.temperature = None if temperature is None or np.all(np.isnan(temperature)) else temperature
        cn = model.thermal.velocities @ np.asarray(normal)
        self.known_t = (cn <= 0).astype(float)

    def __call__(self, F, w=None, dp=None):
        m = self.model
        qf = m.flow.q
        f, g = F[:qf], F[qf:]
        if self.inlet:
            dp = m.inlet_dp if dp is None else dp
            rho_t = 1.0 + dp * (1.0 / m.flow.cs2)
        else:
            rho_t = self.rho_outlet
        f_full, rho, un = self.zh(f, rho_t, m.u_clamp)
        u = self.zh.normal * un
        feq = equilibrium_flow(rho, u, m.flow, m.E)
        f_out = feq + ad.matmul(m.A, f_full - feq)
        if self.temperature is not None:
            T = self.temperature
        else:
            # zero-gradient outflow: equilibrium at the temperature carried by the known densities
            basis = m.thermal.weights[:, None] * (1.0 + ad.matmul(m.Et, u) * (1.0 / m.thermal.cs2))
            T = ad.matmul(self.known_t[None, :], g)[0] / ad.matmul(self.known_t[None, :], basis)[0]
        g_out = equilibrium_thermal(T, u, m.thermal, m.Et)
        return ad.concatenate([f_out, g_out])


class CollisionPlan:
    """Node groups of a tag map, each bound to its vectorised kernel."""

    def __init__(self, model: ModelSpec, tags: NodeTagMap):
        tags.validate()
        self.model = model
        self.tags = tags
        self.groups = []
        for tag, normal, idx in tags.groups():
            if tag == NodeTag.INTERIOR:
                grp = _Interior(model, idx)
            elif tag == NodeTag.WALL:
                grp = _Wall(model, idx)
            elif tag == NodeTag.HEATER:
                temp = tags.temperature[idx]
                grp = _Heater(model, idx, np.where(np.isnan(temp), 1.0, temp))
            else:
                inlet = tag == NodeTag.PRESSURE_INLET
                temp = tags.temperature[idx] if inlet else None
                grp = _Pressure(model, idx, normal, inlet, temp, tags.rho_outlet)
            grp.tag = tag
            self.groups.append(grp)

    def collide(self, f, w, out=None):
        if out is None:
            out = np.empty_like(f)
        for grp in self.groups:
            idx = grp.idx
            try:
                out[:, idx] = grp(f[:, idx], w[idx] if grp.uses_w else None)
            except DivergenceError as exc:
                node = None if exc.node is None else int(idx[exc.node])
                raise DivergenceError(f"{exc} ({grp.tag.name} node {node})", node=node) from None
        return out


def plan_for(model: ModelSpec, tags: NodeTagMap) -> CollisionPlan:
    cache = tags.__dict__.setdefault("_plans", {})
    hit = cache.get(id(model))
    if hit is None or hit.model is not model:
        if len(cache) >= 8:
            cache.clear()
        hit = CollisionPlan(model, tags)
        cache[id(model)] = hit
    return hit


def _w_array(design, n):
    if design is None:
        return np.ones(n)
    w = getattr(design, "w", design)
    return np.asarray(w, dtype=float)


def node_collision(tag, f_coupled, w, model: ModelSpec, normal=(1, 0, 0), temperature=None, rho_outlet=1.0):
    """Collision of a single node (or a column batch of same-tag nodes)."""
    F = np.asarray(f_coupled, dtype=float)
    single = F.ndim == 1
    F = F[:, None] if single else F
    n = F.shape[1]
    idx = np.arange(n)
    w = np.broadcast_to(np.asarray(1.0 if w is None else w, dtype=float), (n,))
    tag = NodeTag(tag)
    if tag == NodeTag.INTERIOR:
        out = _Interior(model, idx)(F, w)
    elif tag == NodeTag.WALL:
        out = _Wall(model, idx)(F)
    elif tag == NodeTag.HEATER:
        temp = np.broadcast_to(np.asarray(1.0 if temperature is None else temperature, float), (n,))
        out = _Heater(model, idx, temp)(F)
    else:
        inlet = tag == NodeTag.PRESSURE_INLET
        temp = None
        if inlet and temperature is not None:
            temp = np.broadcast_to(np.asarray(temperature, float), (n,))
        out = _Pressure(model, idx, normal, inlet, temp, rho_outlet)(F)
    return out[:, 0] if single else out


# ---------------------------------------------------------------------------
# primal iteration
# ---------------------------------------------------------------------------


def primal_step(f, design, model: ModelSpec, tags: NodeTagMap, out=None, iteration=None):
    """One collide-then-stream step: ``f_new_j(x + e_j) = W_j^x(f(x))``."""
    plan = plan_for(model, tags)
    w = _w_array(design, f.shape[1])
    try:
        post = plan.collide(f, w)
    except DivergenceError as exc:
        exc.iteration = iteration
        raise
    out = stream(post, model.velocities, tags.shape, out=out)
    if not np.isfinite(out).all():
        raise DivergenceError(f"non-finite densities after iteration {iteration}", iteration=iteration)
    return out


def initial_state(model: ModelSpec, shape: LatticeShape, rho=1.0, u=(0.0, 0.0, 0.0), T=0.0):
    """Uniform equilibrium state of shape ``(M, N)``."""
    n = shape.n_nodes
    u = np.asarray(u, dtype=float)[: model.dim, None] * np.ones(n)
    f = equilibrium_flow(np.full(n, rho), u, model.flow, model.E)
    g = equilibrium_thermal(np.full(n, T), u, model.thermal, model.Et)
    return np.vstack([f, g])


def macroscopic(f, model: ModelSpec) -> MacroState:
    """Raw moments at every node; ``u`` always has 3 rows."""
    qf = model.flow.q
    rho = f[:qf].sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u2 = (model.flow.velocities.T.astype(float) @ f[:qf]) / rho
    T = f[qf:].sum(axis=0)
    return MacroState(rho, u2, T)


def solve_fixed_point(
    f,
    design,
    model: ModelSpec,
    tags: NodeTagMap,
    tol=1e-10,
    max_iter=100_000,
    record: RunRecord | None = None,
    log_every=1,
    min_iter=0,
):
    """Iterate :func:`primal_step` until ``max |f_{n+1} - f_n| < tol``.

    Returns ``(f_hat, record)``; ``record.converged`` flags success and
    ``record.summary["iterations"]`` holds the exact number of steps taken.
    """
    if not tol > 0:
        raise ConfigurationError("tolerance must be positive")
    record = record if record is not None else RunRecord()
    start = len(record) and record.history["iter"][-1] + 1
    cur = np.array(f, dtype=float, copy=True)
    nxt = np.empty_like(cur)
    t0 = time.perf_counter()
    it = 0
    res = np.inf
    converged = False
    while it < max_iter:
        primal_step(cur, design, model, tags, out=nxt, iteration=it)
        res = float(np.max(np.abs(nxt - cur)))
        cur, nxt = nxt, cur
        it += 1
        if log_every and (it % log_every == 0 or res < tol):
            record.log(start + it - 1, residual=res)
        if res < tol and it >= min_iter:
            converged = True
            break
    record.converged = converged
    record.summary.update(iterations=it, residual=res, seconds=time.perf_counter() - t0)
    return cur, record
