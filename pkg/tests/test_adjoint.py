import numpy as np
import pytest

from adjlbm import autodiff as ad
from adjlbm.adjoint import (
    CaseObjective,
    GradientVector,
    Linearization,
    ParameterDirection,
    adjoint_collide,
    adjoint_step,
    fd_gradient,
    local_jacobian,
    param_gradient,
    solve_adjoint,
    solve_tangent,
    tangent_step,
)
from adjlbm.cases import Case, channel_tags, outlet_support
from adjlbm.collision import ModelSpec, equilibrium_flow, equilibrium_thermal, initial_state, node_collision, primal_step, solve_fixed_point
from adjlbm.lattice import LatticeShape, NodeTag, NodeTagMap, descriptor, total_density_sum
from adjlbm.objective import ObjectiveSpec, objective_partials
from adjlbm.topology import DesignField


def local_state(model, n, rng):
    u = rng.uniform(-0.04, 0.04, (model.dim, n))
    f = equilibrium_flow(rng.uniform(0.97, 1.03, n), u, model.flow, model.E)
    g = equilibrium_thermal(rng.uniform(-0.9, 0.9, n), u, model.thermal, model.Et)
    F = np.vstack([f, g])
    return F * (1 + 0.02 * rng.uniform(-1, 1, F.shape))


@pytest.fixture(scope="module")
def small_case():
    """A converged 10x6 mixer analog with a random intermediate design."""
    shape = LatticeShape(10, 6)
    tags = channel_tags(shape, inlet_temperature="split", design_span=(3, 6))
    model = ModelSpec(nu=0.1, beta_fluid=0.05, beta_solid=0.05, inlet_dp=0.005)
    rng = np.random.default_rng(0)
    design = DesignField.uniform(tags.design, 0.9)
    design.w[tags.design] = rng.uniform(0.6, 0.95, tags.design.sum())
    objective = ObjectiveSpec("MixingFlux", outlet_support(shape, tags))
    case = Case(shape, model, tags, design, objective)
    f, rec = solve_fixed_point(initial_state(model, shape), design, model, tags, tol=1e-14, max_iter=100_000, log_every=0)
    assert rec.converged
    v, arec = solve_adjoint(f, design, model, tags, objective, tol=1e-14, max_iter=100_000, cache=True, log_every=0)
    assert arec.converged
    return case, f, rec, v, arec


# --- local transposed collisions -------------------------------------------


def test_identity_kernel_vjp_is_identity():
    v = np.random.default_rng(1).random((18, 3))
    _, (g,) = ad.vjp(lambda X: X * 1.0, (np.ones((18, 3)),), v)
    np.testing.assert_array_equal(g, v)


def test_bounce_back_adjoint_is_the_permutation():
    rng = np.random.default_rng(2)
    model = ModelSpec()
    f = rng.random(18)
    v = rng.random(18)
    out = adjoint_collide(NodeTag.WALL, f, None, v, model)
    perm = np.concatenate([model.flow.opposite, 9 + model.thermal.opposite])
    np.testing.assert_array_equal(out, v[perm])


@pytest.mark.parametrize(
    "tag,extra",
    [
        (NodeTag.INTERIOR, {}),
        (NodeTag.PRESSURE_INLET, {"normal": (1, 0, 0), "temperature": 1.0}),
        (NodeTag.PRESSURE_OUTLET, {"normal": (-1, 0, 0)}),
        (NodeTag.HEATER, {}),
    ],
)
def test_adjoint_collide_matches_central_differences(tag, extra):
    rng = np.random.default_rng(3)
    model = ModelSpec(nu=0.05, beta_fluid=0.01, beta_solid=0.3, u_clamp=0.5)
    f = local_state(model, 1, rng)[:, 0]
    w = 0.7
    v = rng.standard_normal(18)
    out = adjoint_collide(tag, f, w, v, model, **extra)
    h = 1e-6
    for k in range(18):
        e = np.zeros(18)
        e[k] = h * max(1.0, abs(f[k]))
        fd = v @ (node_collision(tag, f + e, w, model, **extra) - node_collision(tag, f - e, w, model, **extra)) / (2 * e[k])
        assert out[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_objective_partial_is_added():
    rng = np.random.default_rng(4)
    model = ModelSpec()
    f = local_state(model, 1, rng)[:, 0]
    v = rng.standard_normal(18)
    p = rng.standard_normal(18)
    a = adjoint_collide(NodeTag.INTERIOR, f, 0.5, v, model)
    b = adjoint_collide(NodeTag.INTERIOR, f, 0.5, v, model, objective_partial=p)
    np.testing.assert_allclose(b - a, p, rtol=1e-14, atol=1e-15)


def test_forward_and_reverse_local_jacobians_agree(small_case):
    case, f, _, _, _ = small_case
    rng = np.random.default_rng(5)
    v = rng.standard_normal(f.shape)
    J = local_jacobian(f, case.design, case.model, case.tags)
    g, _, _ = Linearization(f, case.design, case.model, case.tags).vjp(v)
    np.testing.assert_allclose(np.einsum("jkx,jx->kx", J, v), g, rtol=1e-12, atol=1e-14)
    a = adjoint_step(v, f, case.design, case.model, case.tags, case.objective, method="forward")
    b = adjoint_step(v, f, case.design, case.model, case.tags, case.objective)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


# --- adjoint stepping -------------------------------------------------------


def test_zero_adjoint_stays_zero(small_case):
    case, f, _, _, _ = small_case
    zero = ObjectiveSpec("Synthetic", [], coefficients=np.zeros(18))
    out = adjoint_step(np.zeros_like(f), f, case.design, case.model, case.tags, zero)
    assert not out.any()
    v, rec = solve_adjoint(f, case.design, case.model, case.tags, zero, tol=1e-12)
    assert not v.any() and rec.summary["iterations"] == 1


def _fd_jacobian(tag, F, w, model, **node):
    h = 1e-6
    J = np.empty((18, 18))
    for k in range(18):
        e = np.zeros(18)
        e[k] = h
        J[:, k] = (node_collision(tag, F + e, w, model, **node) - node_collision(tag, F - e, w, model, **node)) / (2 * h)
    return J


def test_adjoint_step_matches_naive_loop():
    """Direct evaluation of the reversed-streaming update node by node."""
    rng = np.random.default_rng(6)
    shape = LatticeShape(4, 4)
    tags = NodeTagMap.empty(shape)
    tags.tag[[0, 5]] = NodeTag.WALL
    tags.validate()
    model = ModelSpec(nu=0.05, beta_fluid=0.02, beta_solid=0.2)
    f = local_state(model, 16, rng)
    w = rng.uniform(0.3, 1.0, 16)
    v = rng.standard_normal(f.shape)
    spec = ObjectiveSpec("HeatFlux", [3, 7])
    partials = objective_partials(spec, f, model)
    E = model.velocities
    ref = np.zeros_like(v)
    for x in range(16):
        J = _fd_jacobian(NodeTag(tags.tag[x]), f[:, x], w[x], model)
        local = J.T @ v[:, x] + partials[:, x]
        px, py = x % 4, x // 4
        for k in range(18):
            dst = (px - E[k, 0]) % 4 + 4 * ((py - E[k, 1]) % 4)
            ref[k, dst] = local[k]
    out = adjoint_step(v, f, w, model, tags, spec)
    np.testing.assert_allclose(out, ref, rtol=1e-7, atol=1e-8)


def test_adjoint_step_is_affine(small_case):
    case, f, _, _, _ = small_case
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal(f.shape), rng.standard_normal(f.shape)
    args = (f, case.design, case.model, case.tags, case.objective)
    step = lambda v: adjoint_step(v, *args)  # noqa: E731
    c = step(np.zeros_like(f))
    lhs = step(2.0 * a - 3.0 * b) - c
    rhs = 2.0 * (step(a) - c) - 3.0 * (step(b) - c)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_all_bounce_back_adjoint_preserves_sum():
    rng = np.random.default_rng(8)
    shape = LatticeShape(5, 4)
    tags = NodeTagMap.empty(shape)
    tags.tag[:] = NodeTag.WALL
    model = ModelSpec()
    f = local_state(model, shape.n_nodes, rng)
    v = rng.standard_normal(f.shape)
    zero = ObjectiveSpec("Synthetic", [], coefficients=np.zeros(18))
    out = adjoint_step(v, f, None, model, tags, zero)
    assert np.array_equal(np.sort(out, axis=None), np.sort(v, axis=None))
    assert total_density_sum(out) == pytest.approx(total_density_sum(v), abs=1e-13)


def test_adjoint_converges_at_primal_rate(small_case):
    _, _, rec, _, arec = small_case
    assert arec.summary["iterations"] <= 3 * rec.summary["iterations"]
    assert arec.summary["residual"] < 1e-14


def test_uncached_solve_matches_cached(small_case):
    case, f, _, v, _ = small_case
    v2, _ = solve_adjoint(f, case.design, case.model, case.tags, case.objective, fixed_iterations=50, cache=False)
    v3, _ = solve_adjoint(f, case.design, case.model, case.tags, case.objective, fixed_iterations=50, cache=True)
    np.testing.assert_array_equal(v2, v3)


# --- gradients --------------------------------------------------------------


def test_gradient_vanishes_when_collision_ignores_parameters(small_case):
    case, f, _, v, _ = small_case
    fluid = DesignField.uniform(case.tags.design, 1.0)
    gv = param_gradient(v, f, fluid, case.model, case.tags)
    # G'(1) = 0 and beta_fluid == beta_solid
    assert np.abs(gv.design).max() == 0.0


def test_sealed_design_node_has_no_influence():
    shape = LatticeShape(12, 7)
    tags = channel_tags(shape, inlet_temperature="split")
    box = [shape.index(x, y) for x in range(4, 7) for y in range(2, 5) if (x, y) != (5, 3)]
    tags.tag[box] = NodeTag.WALL
    inside = shape.index(5, 3)
    tags.design[inside] = True
    tags.validate()
    model = ModelSpec(nu=0.1, beta_fluid=0.05, beta_solid=0.2, inlet_dp=0.005)
    design = DesignField.uniform(tags.design, 0.5)
    spec = ObjectiveSpec("MixingFlux", outlet_support(shape, tags))
    f, _ = solve_fixed_point(initial_state(model, shape), design, model, tags, tol=1e-13, max_iter=50_000, log_every=0)
    v, _ = solve_adjoint(f, design, model, tags, spec, tol=1e-13, max_iter=50_000, cache=True, log_every=0)
    gv = param_gradient(v, f, design, model, tags)
    assert abs(gv.design[0]) < 1e-10
    assert abs(gv.globals["inlet_dp"]) > 1e-6


def test_adjoint_gradient_matches_finite_differences(small_case):
    case, f, _, v, _ = small_case
    gv = param_gradient(v, f, case.design, case.model, case.tags)
    objective = CaseObjective(case, f, tol=1e-14)
    x0 = objective.vector()
    comps = [0, 3, len(x0) - 1]
    fd = fd_gradient(objective, x0, comps, 1e-6)
    exact = gv.as_array()[comps]
    np.testing.assert_allclose(fd, exact, rtol=1e-5)


def test_penalty_term_enters_gradient(small_case):
    case, f, _, v, _ = small_case
    plain = param_gradient(v, f, case.design, case.model, case.tags)
    pen = param_gradient(v, f, case.design, case.model, case.tags, penalty_weight=0.5)
    w = case.design.w[plain.design_nodes]
    np.testing.assert_allclose(plain.design - pen.design, 0.5 * (1 - 2 * w), rtol=1e-13, atol=1e-15)


def test_gradient_vector_layout():
    gv = GradientVector(np.array([3, 5]), np.array([0.1, 0.2]), {"inlet_dp": 2.0})
    assert gv.as_array().tolist() == [0.1, 0.2, 2.0]
    assert gv.full(7).tolist() == [0, 0, 0, 0.1, 0, 0.2, 0]
    assert gv.norm == pytest.approx(np.sqrt(0.01 + 0.04 + 4.0))
    d = ParameterDirection.from_vector(gv, np.array([1.0, -1.0, 0.5]), 7)
    assert d.dot(gv) == pytest.approx(0.1 - 0.2 + 1.0)


# --- tangent mode -----------------------------------------------------------


def test_tangent_zero_direction(small_case):
    case, f, _, _, _ = small_case
    d = ParameterDirection(np.zeros(case.shape.n_nodes), {"inlet_dp": 0.0})
    assert not tangent_step(np.zeros_like(f), f, d, case.design, case.model, case.tags).any()


def test_tangent_is_linear_in_direction(small_case):
    case, f, _, _, _ = small_case
    rng = np.random.default_rng(9)
    dw = np.where(case.design.mask, rng.standard_normal(case.shape.n_nodes), 0.0)
    d1 = ParameterDirection(dw, {"inlet_dp": 0.3})
    d2 = ParameterDirection(2 * dw, {"inlet_dp": 0.6})
    df = rng.standard_normal(f.shape) * 1e-3
    a = tangent_step(df, f, d1, case.design, case.model, case.tags)
    b = tangent_step(2 * df, f, d2, case.design, case.model, case.tags)
    np.testing.assert_allclose(b, 2 * a, rtol=1e-13, atol=1e-16)


def test_tangent_adjoint_duality(small_case):
    case, f, _, v, _ = small_case
    gv = param_gradient(v, f, case.design, case.model, case.tags)
    rng = np.random.default_rng(10)
    for _ in range(2):
        d = ParameterDirection.from_vector(gv, rng.standard_normal(len(gv.as_array())), case.shape.n_nodes)
        _, dF, info = solve_tangent(f, d, case.design, case.model, case.tags, case.objective, tol=1e-15, max_iter=100_000)
        assert info["converged"]
        assert dF == pytest.approx(d.dot(gv), rel=1e-10)


# --- finite differences -----------------------------------------------------


def test_fd_quadratic():
    g = fd_gradient(lambda x: x[0] ** 2, [3.0], [0], 1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-7)
    rows = fd_gradient(lambda x: x[0] ** 2, [3.0], [0], [1e-2, 1e-3])
    assert rows.shape == (2, 1)
    with pytest.raises(ValueError):
        fd_gradient(lambda x: x[0], [0.0], [0], 0.0)


def test_fd_error_is_second_order():
    fn = lambda x: np.sin(x[0]) * np.exp(x[1])  # noqa: E731
    exact = np.cos(0.4) * np.exp(0.2)
    errs = [abs(fd_gradient(fn, [0.4, 0.2], [0], h)[0] - exact) for h in (1e-2, 5e-3, 2.5e-3)]
    ratios = [errs[i] / errs[i + 1] for i in range(2)]
    for r in ratios:
        assert 3.5 < r < 4.5


def test_case_objective_counts_solves(small_case):
    case, f, _, _, _ = small_case
    obj = CaseObjective(case, f, tol=1e-12)
    x = obj.vector()
    obj(x)
    design, model = obj.unpack(x)
    assert model is case.model
    assert np.array_equal(design.w, case.design.w)
    x2 = x.copy()
    x2[-1] *= 1.1
    assert obj.unpack(x2)[1].inlet_dp == pytest.approx(case.model.inlet_dp * 1.1)
    assert obj.solves == 1


def test_one_primal_step_after_convergence_is_idle(small_case):
    case, f, _, _, _ = small_case
    np.testing.assert_allclose(primal_step(f, case.design, case.model, case.tags), f, atol=1e-13)


def test_cached_tangent_matches_dual_number_tangent(small_case):
    case, f, _, v, _ = small_case
    gv = param_gradient(v, f, case.design, case.model, case.tags)
    d = ParameterDirection.from_vector(gv, np.random.default_rng(4).standard_normal(len(gv.as_array())), case.shape.n_nodes)
    a = solve_tangent(f, d, case.design, case.model, case.tags, case.objective, tol=1e-14)
    b = solve_tangent(f, d, case.design, case.model, case.tags, case.objective, tol=1e-14, cache=True)
    assert a[2]["iterations"] == b[2]["iterations"]
    assert b[1] == pytest.approx(a[1], rel=1e-12)
