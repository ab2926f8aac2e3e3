import numpy as np
import pytest

from adjlbm import autodiff as ad
from adjlbm.adjoint import Linearization
from adjlbm.cases import channel_tags
from adjlbm.collision import (
    ModelSpec,
    RelaxationSpec,
    apply_forcing,
    bounce_back,
    collide_bgk,
    collide_fmrt,
    equilibrium_flow,
    equilibrium_thermal,
    initial_state,
    moments,
    node_collision,
    omega_from_viscosity,
    plan_for,
    primal_step,
    solve_fixed_point,
    viscosity_from_omega,
    zou_he_pressure,
)
from adjlbm.errors import ConfigurationError, DivergenceError
from adjlbm.lattice import LatticeShape, NodeTag, NodeTagMap, descriptor
from adjlbm.topology import DesignField

D2Q9 = descriptor("D2Q9")


def periodic_tags(shape):
    return NodeTagMap.empty(shape)


def random_state(model, n, rng, amp=0.02):
    """Near-equilibrium random densities with modest velocities and temperatures."""
    u = rng.uniform(-0.05, 0.05, (model.dim, n))
    f = equilibrium_flow(rng.uniform(0.95, 1.05, n), u, model.flow, model.E)
    g = equilibrium_thermal(rng.uniform(-0.8, 0.8, n), u, model.thermal, model.Et)
    F = np.vstack([f, g])
    return F + amp * rng.uniform(-1, 1, F.shape) * np.abs(F).max(axis=1, keepdims=True) * 0.1


# --- moments and equilibria -------------------------------------------------


def test_moments_of_weights():
    rho, u = moments(D2Q9.weights[:, None], D2Q9)
    assert rho[0] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(u[:, 0], 0.0, atol=1e-16)
    rho, u = moments(2 * D2Q9.weights[:, None], D2Q9)
    assert rho[0] == pytest.approx(2.0, abs=1e-15)
    np.testing.assert_allclose(u[:, 0], 0.0, atol=1e-16)


def test_moments_match_naive_loop():
    rng = np.random.default_rng(0)
    f = rng.random((9, 12)) + 0.1
    rho, u = moments(f, D2Q9)
    for n in range(12):
        r = 0.0
        jx = jy = 0.0
        for j in range(9):
            r += f[j, n]
            jx += f[j, n] * D2Q9.velocities[j, 0]
            jy += f[j, n] * D2Q9.velocities[j, 1]
        assert rho[n] == pytest.approx(r, rel=1e-14)
        assert u[0, n] == pytest.approx(jx / r, rel=1e-14, abs=1e-15)
        assert u[1, n] == pytest.approx(jy / r, rel=1e-14, abs=1e-15)


def test_moments_reject_non_positive_density():
    f = np.tile(D2Q9.weights[:, None], (1, 3))
    f[:, 1] *= -1
    with pytest.raises(DivergenceError) as err:
        moments(f, D2Q9)
    assert err.value.node == 1


def test_equilibrium_flow_examples():
    np.testing.assert_allclose(equilibrium_flow(np.ones(1), np.zeros((2, 1)), D2Q9)[:, 0], D2Q9.weights)
    u = np.array([[0.05], [0.0]])
    feq = equilibrium_flow(np.array([1.05]), u, D2Q9)
    rho, u2 = moments(feq, D2Q9)
    assert rho[0] == pytest.approx(1.05, abs=1e-13)
    np.testing.assert_allclose(u2[:, 0], [0.05, 0.0], atol=1e-13)
    np.testing.assert_allclose(equilibrium_flow(np.array([2.0]), u, D2Q9), 2 * equilibrium_flow(np.array([1.0]), u, D2Q9))


def test_equilibrium_flow_textbook_constants():
    u = np.array([0.03, -0.02])
    feq = equilibrium_flow(np.array([1.1]), u[:, None], D2Q9)[:, 0]
    for j in range(9):
        eu = D2Q9.velocities[j, :2] @ u
        ref = D2Q9.weights[j] * 1.1 * (1 + 3 * eu + 4.5 * eu**2 - 1.5 * (u @ u))
        assert feq[j] == pytest.approx(ref, rel=1e-14)


def test_equilibrium_thermal_examples():
    rng = np.random.default_rng(1)
    np.testing.assert_allclose(equilibrium_thermal(np.ones(1), np.zeros((2, 1)), D2Q9)[:, 0], D2Q9.weights)
    assert not equilibrium_thermal(np.zeros(4), rng.random((2, 4)), D2Q9).any()
    T = rng.standard_normal(6)
    u = rng.uniform(-0.1, 0.1, (2, 6))
    np.testing.assert_allclose(equilibrium_thermal(T, u, D2Q9).sum(axis=0), T, rtol=1e-14, atol=1e-15)
    d7 = descriptor("D3Q7")
    np.testing.assert_allclose(equilibrium_thermal(T, rng.uniform(-0.1, 0.1, (3, 6)), d7).sum(axis=0), T, atol=1e-14)


# --- collision operators ----------------------------------------------------


def test_relaxation_from_viscosity():
    assert 1.0 / omega_from_viscosity(0.02) == pytest.approx(0.56)
    assert omega_from_viscosity(0.02) == pytest.approx(1.785714, abs=1e-6)
    assert viscosity_from_omega(omega_from_viscosity(0.1)) == pytest.approx(0.1)
    with pytest.raises(ConfigurationError):
        RelaxationSpec(2.0)
    with pytest.raises(ConfigurationError):
        RelaxationSpec(1.0, np.array([1.0, 2.5]))


def test_fmrt_equilibrium_is_fixed_point():
    rng = np.random.default_rng(2)
    feq = equilibrium_flow(np.array([1.02]), rng.uniform(-0.05, 0.05, (2, 1)), D2Q9)
    U = D2Q9.moment_matrix
    meq = U @ feq
    diag = rng.uniform(0.5, 1.8, 9)
    np.testing.assert_allclose(collide_fmrt(feq, meq, meq, diag, U), feq, atol=1e-15)


def test_fmrt_reduces_to_bgk():
    rng = np.random.default_rng(3)
    f = rng.random((9, 5))
    feq = equilibrium_flow(f.sum(axis=0), rng.uniform(-0.05, 0.05, (2, 5)), D2Q9)
    omega = 1.3
    out = collide_fmrt(f, feq, feq, np.full(9, omega), np.eye(9))
    np.testing.assert_allclose(out, collide_bgk(f, feq, omega), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(out, f + omega * (feq - f), rtol=1e-13, atol=1e-15)


def test_fmrt_rejects_singular_matrix():
    with pytest.raises(ConfigurationError):
        collide_fmrt(np.ones((2, 1)), 0, 0, [1, 1], np.ones((2, 2)))


def test_zero_forcing_fmrt_conserves_mass():
    rng = np.random.default_rng(4)
    model = ModelSpec(nu=0.05)
    F = random_state(model, 20, rng)
    out = node_collision(NodeTag.INTERIOR, F, 1.0, model)
    np.testing.assert_allclose(out[:9].sum(axis=0), F[:9].sum(axis=0), rtol=1e-13)
    np.testing.assert_allclose(out[9:].sum(axis=0), F[9:].sum(axis=0), rtol=1e-13, atol=1e-14)


def test_apply_forcing_examples():
    u = np.array([[0.04], [-0.01]])
    np.testing.assert_array_equal(apply_forcing(u, 1.0), u)
    np.testing.assert_array_equal(apply_forcing(u, 0.0), 0 * u)
    np.testing.assert_allclose(apply_forcing(u, 0.5), 0.875 * u, rtol=1e-15)


def test_bounce_back():
    f = np.zeros((9, 1))
    east = int(np.flatnonzero((D2Q9.velocities == [1, 0, 0]).all(axis=1))[0])
    west = int(np.flatnonzero((D2Q9.velocities == [-1, 0, 0]).all(axis=1))[0])
    f[east] = 1.0
    assert bounce_back(f, D2Q9)[west, 0] == 1.0
    rng = np.random.default_rng(5)
    g = rng.random((9, 4))
    assert np.array_equal(bounce_back(bounce_back(g, D2Q9), D2Q9), g)
    np.testing.assert_allclose(bounce_back(g, D2Q9).sum(axis=0), g.sum(axis=0), rtol=1e-15)


# --- Zou-He ----------------------------------------------------------------


@pytest.mark.parametrize("normal", [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)])
def test_zou_he_reproduces_equilibrium(normal):
    n = np.array(normal[:2], dtype=float)
    u = 0.03 * n[:, None]
    feq = equilibrium_flow(np.array([1.02]), u, D2Q9)
    rho_t = 1.02
    out = zou_he_pressure(feq, rho_t, normal, D2Q9, u_clamp=0.05)
    np.testing.assert_allclose(out, feq, atol=1e-12)


def test_zou_he_moments_and_clamp():
    rng = np.random.default_rng(6)
    feq = equilibrium_flow(np.ones(3), rng.uniform(-0.01, 0.01, (2, 3)), D2Q9)
    for rho_t, clamp in ((1.0, 0.05), (1.05, 0.05), (1.05, 0.01)):
        out = zou_he_pressure(feq, rho_t, (1, 0, 0), D2Q9, u_clamp=clamp)
        rho, u = moments(out, D2Q9)
        # tangential velocity is removed exactly
        np.testing.assert_allclose(u[1], 0.0, atol=1e-15)
        if clamp == 0.01:
            np.testing.assert_allclose(u[0], 0.01, rtol=1e-12)
        else:
            np.testing.assert_allclose(rho, rho_t, rtol=1e-13)
            assert np.all(u[0] <= 0.05 + 1e-15)


def test_zou_he_rejects_oblique_normal():
    with pytest.raises(ConfigurationError):
        zou_he_pressure(np.ones((9, 1)), 1.0, (1, 1, 0), D2Q9)


def test_inlet_density_for_mixer_pressure_drop():
    assert ModelSpec(inlet_dp=0.05 / 3).inlet_density == pytest.approx(1.05, abs=1e-12)
    assert ModelSpec(inlet_dp=0.0).inlet_density == 1.0


# --- node collision ---------------------------------------------------------


def test_interior_equilibrium_is_unchanged():
    model = ModelSpec()
    u = np.array([[0.02], [0.01]])
    F = np.vstack([equilibrium_flow(np.array([1.01]), u, D2Q9), equilibrium_thermal(np.array([0.3]), u, D2Q9)])
    np.testing.assert_allclose(node_collision(NodeTag.INTERIOR, F[:, 0], 1.0, model), F[:, 0], atol=1e-15)


def test_solid_interior_node_has_zero_outgoing_velocity():
    rng = np.random.default_rng(7)
    model = ModelSpec()
    F = random_state(model, 5, rng)
    out = node_collision(NodeTag.INTERIOR, F, 0.0, model)
    np.testing.assert_allclose(D2Q9.velocities[:, :2].T @ out[:9], 0.0, atol=1e-15)


def test_wall_and_heater_nodes():
    rng = np.random.default_rng(8)
    model = ModelSpec()
    F = rng.random(18)
    out = node_collision(NodeTag.WALL, F, None, model)
    np.testing.assert_array_equal(out[:9], F[:9][D2Q9.opposite])
    np.testing.assert_array_equal(out[9:], F[9:][D2Q9.opposite])
    out = node_collision(NodeTag.HEATER, F, None, model, temperature=1.0)
    np.testing.assert_array_equal(out[:9], F[:9][D2Q9.opposite])
    np.testing.assert_allclose(out[9:], D2Q9.weights)


def test_collision_is_node_local():
    """Permuting the node order of a group permutes the output identically."""
    rng = np.random.default_rng(9)
    model = ModelSpec()
    F = random_state(model, 30, rng)
    w = rng.random(30)
    perm = rng.permutation(30)
    a = node_collision(NodeTag.INTERIOR, F, w, model)
    b = node_collision(NodeTag.INTERIOR, F[:, perm], w[perm], model)
    np.testing.assert_allclose(a[:, perm], b, rtol=0, atol=1e-15)


def _fd_vjp_check(model, n, rng):
    """Hand-written interior VJP against the reverse-mode tape and central differences."""
    from adjlbm.collision import _Interior

    F = random_state(model, n, rng)
    w = rng.uniform(0.05, 0.95, n)
    cot = rng.standard_normal(F.shape)
    grp = _Interior(model, np.arange(n))
    gF, gw = grp.vjp(F, w, cot)
    Fv, Wv = ad.Var(F), ad.Var(w)
    grp(Fv, Wv).backward(cot)
    np.testing.assert_allclose(gF, Fv.grad, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gw, Wv.grad, rtol=1e-12, atol=1e-14)
    h = 1e-6
    fd = ((cot * (grp(F, w + h) - grp(F, w - h))).sum(axis=0)) / (2 * h)
    np.testing.assert_allclose(gw, fd, rtol=1e-6, atol=1e-9)


def test_interior_vjp_2d():
    _fd_vjp_check(ModelSpec(nu=0.03, beta_fluid=0.01, beta_solid=0.4), 25, np.random.default_rng(10))


def test_interior_vjp_3d_and_bgk():
    _fd_vjp_check(ModelSpec("D3Q19", "D3Q7", nu=0.02, beta_fluid=0.003, beta_solid=1.0), 10, np.random.default_rng(11))
    _fd_vjp_check(ModelSpec(mode="BGK", nu=0.1), 10, np.random.default_rng(12))


# --- primal stepping --------------------------------------------------------


def test_uniform_equilibrium_is_stationary():
    model = ModelSpec()
    shape = LatticeShape(5, 4)
    f = initial_state(model, shape, rho=1.0, u=(0.02, -0.01, 0.0), T=0.4)
    np.testing.assert_allclose(primal_step(f, None, model, periodic_tags(shape)), f, atol=1e-15)


def _naive_step(f, w, model, shape):
    """Two-loop reference: explicit MRT + BGK per node, then scatter along e_j."""
    E = D2Q9.velocities
    U = D2Q9.moment_matrix
    diag = np.ones(9)
    diag[[7, 8]] = model.omega
    beta = lambda wv: wv * model.beta_fluid + (1 - wv) * model.beta_solid  # noqa: E731
    out = np.zeros_like(f)
    for node in range(shape.n_nodes):
        x, y = node % shape.Lx, node // shape.Lx
        fl, gl = f[:9, node], f[9:, node]
        rho = sum(fl)
        ux = sum(fl[j] * E[j, 0] for j in range(9)) / rho
        uy = sum(fl[j] * E[j, 1] for j in range(9)) / rho
        G = 1 - (1 - w[node]) ** 3

        def feq(r, vx, vy):
            return np.array(
                [
                    D2Q9.weights[j] * r * (1 + 3 * (E[j, 0] * vx + E[j, 1] * vy) + 4.5 * (E[j, 0] * vx + E[j, 1] * vy) ** 2 - 1.5 * (vx * vx + vy * vy))
                    for j in range(9)
                ]
            )

        m_post = U @ feq(rho, G * ux, G * uy)
        m_pre = U @ feq(rho, ux, uy)
        fo = np.linalg.solve(U, m_post + (1 - diag) * (U @ fl - m_pre))
        T = sum(gl)
        ot = 1 / (0.5 + 3 * beta(w[node]))
        geq = np.array([D2Q9.weights[j] * T * (1 + 3 * (E[j, 0] * G * ux + E[j, 1] * G * uy)) for j in range(9)])
        go = gl + ot * (geq - gl)
        for j in range(9):
            dst = (x + E[j, 0]) % shape.Lx + shape.Lx * ((y + E[j, 1]) % shape.Ly)
            out[j, dst] = fo[j]
            out[9 + j, dst] = go[j]
    return out


def test_primal_step_matches_naive_loop():
    rng = np.random.default_rng(13)
    model = ModelSpec(nu=0.04, beta_fluid=0.01, beta_solid=0.2)
    shape = LatticeShape(4, 4)
    f = random_state(model, shape.n_nodes, rng)
    w = rng.random(shape.n_nodes)
    np.testing.assert_allclose(primal_step(f, w, model, periodic_tags(shape)), _naive_step(f, w, model, shape), rtol=1e-13, atol=1e-15)


def test_thermal_scalar_conserved_on_periodic_domain():
    rng = np.random.default_rng(14)
    model = ModelSpec(beta_fluid=0.01, beta_solid=0.3)
    shape = LatticeShape(6, 5)
    f = random_state(model, shape.n_nodes, rng)
    w = rng.random(shape.n_nodes)
    total = f[9:].sum()
    for _ in range(5):
        f = primal_step(f, w, model, periodic_tags(shape))
        assert f[9:].sum() == pytest.approx(total, rel=1e-12, abs=1e-12)


def test_divergence_is_reported():
    model = ModelSpec()
    shape = LatticeShape(3, 3)
    f = initial_state(model, shape)
    f[:, 4] = np.nan
    with pytest.raises(DivergenceError):
        primal_step(f, None, model, periodic_tags(shape), iteration=7)


# --- fixed point ------------------------------------------------------------


def small_channel():
    shape = LatticeShape(24, 9)
    tags = channel_tags(shape, inlet_temperature="split")
    return shape, tags, ModelSpec(nu=0.1, beta_fluid=0.05, beta_solid=0.05, inlet_dp=0.005)


def test_converged_state_returns_immediately():
    shape, tags, model = small_channel()
    f, rec = solve_fixed_point(initial_state(model, shape), None, model, tags, tol=1e-10, max_iter=20000)
    assert rec.converged
    _, rec2 = solve_fixed_point(f, None, model, tags, tol=1e-10)
    assert rec2.converged and rec2.summary["iterations"] <= 1


def test_residual_history_settles():
    shape, tags, model = small_channel()
    _, rec = solve_fixed_point(initial_state(model, shape), None, model, tags, tol=1e-10, max_iter=20000)
    r = np.asarray(rec.column("residual"))
    tail = r[len(r) // 5 :]
    # non-increasing over the trailing 80% within 10% jitter
    assert np.all(tail[1:] <= 1.1 * np.maximum.accumulate(tail[::-1])[::-1][:-1] + 1e-300)
    assert np.all(tail[1:] <= 1.1 * np.minimum.accumulate(tail)[:-1])


def test_tolerance_must_be_positive():
    shape, tags, model = small_channel()
    with pytest.raises(ConfigurationError):
        solve_fixed_point(initial_state(model, shape), None, model, tags, tol=0.0)


def test_plan_is_reused_per_model():
    shape, tags, model = small_channel()
    assert plan_for(model, tags) is plan_for(model, tags)
    other = ModelSpec(nu=0.2)
    assert plan_for(other, tags) is not plan_for(model, tags)


def test_model_rejects_bad_parameters():
    with pytest.raises(ConfigurationError):
        ModelSpec(nu=-1)
    with pytest.raises(ConfigurationError):
        ModelSpec(beta_fluid=-0.1)
    with pytest.raises(ConfigurationError):
        ModelSpec(u_clamp=0)
    assert ModelSpec("D3Q19", "D3Q7").M == 26


def test_linearization_fast_path_matches_tape():
    rng = np.random.default_rng(15)
    shape = LatticeShape(20, 8)
    tags = channel_tags(shape, inlet_temperature="uniform", heater=(8, 11), design_span=(4, 16))
    model = ModelSpec(nu=0.05, beta_fluid=0.01, beta_solid=0.5, inlet_dp=0.01)
    design = DesignField.uniform(tags.design, 0.7)
    design.w[tags.design] = rng.uniform(0.1, 0.95, tags.design.sum())
    f = initial_state(model, shape)
    for _ in range(30):
        f = primal_step(f, design, model, tags)
    v = rng.standard_normal(f.shape)
    fast = Linearization(f, design, model, tags).vjp(v)
    tape = Linearization(f, design, model, tags, taped=True).vjp(v)
    for a, b in zip(fast, tape):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
