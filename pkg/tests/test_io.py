import numpy as np
import pytest

from adjlbm import io as fio
from adjlbm.cases import Case, channel_tags, outlet_support
from adjlbm.collision import ModelSpec, solve_fixed_point
from adjlbm.lattice import LatticeShape
from adjlbm.objective import ObjectiveSpec, raw_objective
from adjlbm.topology import DesignField


@pytest.fixture(scope="module")
def solved():
    shape = LatticeShape(20, 7)
    tags = channel_tags(shape, inlet_temperature="split", design_span=(5, 12))
    model = ModelSpec(nu=0.1, beta_fluid=0.05, beta_solid=0.05, inlet_dp=0.005)
    rng = np.random.default_rng(4)
    design = DesignField.uniform(tags.design, 1.0)
    design.w[tags.design] = rng.uniform(0.5, 1.0, tags.design.sum())
    case = Case(shape, model, tags, design, ObjectiveSpec("MixingFlux", outlet_support(shape, tags)))
    f, _ = solve_fixed_point(case.initial_state(), design, model, tags, tol=1e-9, max_iter=50_000)
    return case, f


def test_field_dump_has_one_row_per_node(solved, tmp_path):
    case, f = solved
    csv_path, vtk_path = fio.write_fields(f, case.design, case.model, case.shape, tmp_path / "fields.csv")
    table = fio.read_fields(csv_path)
    assert table.shape == (case.shape.n_nodes, 9)
    np.testing.assert_array_equal(fio.read_vtk_scalar(vtk_path, "w"), case.design.w)
    np.testing.assert_array_equal(fio.read_vtk_scalar(vtk_path, "rho"), table[:, 3])


def test_dump_load_dump_is_byte_identical(solved, tmp_path):
    case, f = solved
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    fio.write_fields(f, case.design, case.model, case.shape, a)
    fio.write_field_table(fio.read_fields(a), b)
    assert a.read_bytes() == b.read_bytes()
    fio.write_design(case.design, case.shape, tmp_path / "d1.csv")
    d = fio.read_design(tmp_path / "d1.csv", case.shape)
    fio.write_design(d, case.shape, tmp_path / "d2.csv")
    assert (tmp_path / "d1.csv").read_bytes() == (tmp_path / "d2.csv").read_bytes()
    np.testing.assert_array_equal(d.mask, case.design.mask)


def test_outlet_sums_from_the_dump_reproduce_the_objective(solved, tmp_path):
    case, f = solved
    fio.write_fields(f, case.design, case.model, case.shape, tmp_path / "fields.csv")
    t = fio.read_fields(tmp_path / "fields.csv")
    rows = t[case.objective.support]
    ux, T = rows[:, 4], rows[:, 7]
    from_dump = float(np.sum(ux * (1 - T**2)))
    assert from_dump == pytest.approx(raw_objective(case.objective, f, case.model), abs=1e-12)


def test_design_file_validation(tmp_path):
    shape = LatticeShape(4, 3)
    p = tmp_path / "short.csv"
    p.write_text("x,y,z,w\n0,0,0,0.5\n")
    with pytest.raises(ValueError, match="rows"):
        fio.read_design(p, shape)
    p.write_text("a,b,c\n")
    with pytest.raises(ValueError, match="x,y,z,w"):
        fio.read_design(p, shape)


def test_curve_round_trip(tmp_path):
    curve = [(0.1, 1.0 / 3.0), (0.5, 2.0 / 3.0)]
    fio.write_curve(curve, tmp_path / "c.csv")
    assert fio.read_curve(tmp_path / "c.csv") == curve
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "eta,objective"


def test_state_snapshot_round_trip(solved, tmp_path):
    case, f = solved
    fio.save_state(tmp_path / "s.npz", f, case.shape, converged=True)
    snap = fio.load_state(tmp_path / "s.npz")
    assert snap["shape"] == case.shape and bool(snap["converged"])
    np.testing.assert_array_equal(snap["f"], f)


def test_unwritable_path_names_the_file(tmp_path):
    with pytest.raises(OSError, match="missing"):
        fio.write_curve([(0.0, 1.0)], tmp_path / "missing" / "c.csv")
