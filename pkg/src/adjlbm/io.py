"""Field, design, gradient and curve files.

Numbers are written with 17 significant digits, which round-trips every
binary64 value, so dump -> load -> dump reproduces a file byte for byte.
"""

from __future__ import annotations

import csv
import os

import numpy as np

from .collision import ModelSpec, macroscopic
from .lattice import LatticeShape
from .topology import DesignField

FIELD_COLUMNS = ("x", "y", "z", "rho", "ux", "uy", "uz", "T", "w")


def fmt(v):
    return format(float(v), ".17g")


def _open(path, mode="w"):
    try:
        return open(path, mode, newline="")
    except OSError as exc:
        raise OSError(f"cannot open {os.fspath(path)!r}: {exc.strerror}") from exc


def field_table(f, design, model: ModelSpec, shape: LatticeShape):
    """``(N, 9)`` array of ``x, y, z, rho, ux, uy, uz, T, w`` per node."""
    m = macroscopic(f, model)
    x, y, z = shape.coords()
    w = np.ones(shape.n_nodes) if design is None else getattr(design, "w", design)
    return np.column_stack([x, y, z, m.rho, m.u[0], m.u[1], m.u[2], m.T, w])


def write_fields(f, design, model: ModelSpec, shape: LatticeShape, path):
    """Write ``path`` (CSV) and the VTK twin next to it (``.vtk`` suffix).

    Returns the two paths written.
    """
    table = field_table(f, design, model, shape)
    write_field_table(table, path)
    vtk = os.path.splitext(os.fspath(path))[0] + ".vtk"
    write_vtk(table, shape, vtk)
    return os.fspath(path), vtk


def write_field_table(table, path):
    with _open(path) as fh:
        fh.write(",".join(FIELD_COLUMNS) + "\n")
        for row in table:
            fh.write(",".join([str(int(row[0])), str(int(row[1])), str(int(row[2]))] + [fmt(v) for v in row[3:]]) + "\n")


def read_fields(path):
    """Load a field CSV back into the ``(N, 9)`` table."""
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != FIELD_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return np.array([[float(v) for v in row] for row in reader])


def write_vtk(table, shape: LatticeShape, path):
    """VTK legacy ASCII structured points with scalars rho, T, w and vector u."""
    with _open(path) as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("lattice Boltzmann fields\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {shape.Lx} {shape.Ly} {shape.Lz}\n")
        fh.write("ORIGIN 0 0 0\nSPACING 1 1 1\n")
        fh.write(f"POINT_DATA {shape.n_nodes}\n")
        for name, col in (("rho", 3), ("T", 7), ("w", 8)):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(fmt(v) for v in table[:, col]) + "\n")
        fh.write("VECTORS u double\n")
        fh.write("\n".join(" ".join(fmt(v) for v in row) for row in table[:, 4:7]) + "\n")


def read_vtk_scalar(path, name):
    """Read one named scalar block from a file written by :func:`write_vtk`."""
    with _open(path, "r") as fh:
        lines = fh.read().splitlines()
    n = int(next(ln for ln in lines if ln.startswith("POINT_DATA")).split()[1])
    start = lines.index(f"SCALARS {name} double 1") + 2
    return np.array([float(v) for v in lines[start : start + n]])


def write_design(design: DesignField, shape: LatticeShape, path):
    """``x,y,z,w`` for every node; the mask travels in a companion column ``design``."""
    x, y, z = shape.coords()
    with _open(path) as fh:
        fh.write("x,y,z,w,design\n")
        for i in range(shape.n_nodes):
            fh.write(f"{x[i]},{y[i]},{z[i]},{fmt(design.w[i])},{int(design.mask[i])}\n")


def read_design(path, shape: LatticeShape) -> DesignField:
    with _open(path, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["x", "y", "z", "w"]:
            raise ValueError(f"{path}: expected columns x,y,z,w")
        w = np.ones(shape.n_nodes)
        mask = np.zeros(shape.n_nodes, dtype=bool)
        seen = 0
        for row in reader:
            i = shape.index(int(row[0]), int(row[1]), int(row[2]))
            w[i] = float(row[3])
            mask[i] = bool(int(row[4])) if len(row) > 4 else True
            seen += 1
    if seen != shape.n_nodes:
        raise ValueError(f"{path}: {seen} rows for a lattice of {shape.n_nodes} nodes")
    return DesignField(w, mask)


def write_gradient(gv, shape: LatticeShape, path):
    """``x,y,z,dF_dw`` per design node followed by ``# name = value`` lines for globals."""
    x, y, z = shape.coords()
    with _open(path) as fh:
        fh.write("x,y,z,dF_dw\n")
        for i, g in zip(gv.design_nodes, gv.design):
            fh.write(f"{x[i]},{y[i]},{z[i]},{fmt(g)}\n")
        for name in sorted(gv.globals):
            fh.write(f"# dF_d{name} = {fmt(gv.globals[name])}\n")


def write_curve(curve, path, columns=("eta", "objective")):
    with _open(path) as fh:
        fh.write(",".join(columns) + "\n")
        for row in curve:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_curve(path):
    with _open(path, "r") as fh:
        next(fh)
        return [tuple(float(v) for v in line.strip().split(",")) for line in fh if line.strip()]


def save_state(path, f, shape: LatticeShape, **meta):
    """Binary snapshot of the full density field (``.npz``) for restarts."""
    np.savez(path, f=f, dims=np.array(shape.dims), **{k: np.asarray(v) for k, v in meta.items()})


def load_state(path):
    with np.load(path) as data:
        out = {k: data[k] for k in data.files}
    out["shape"] = LatticeShape(*map(int, out.pop("dims")))
    return out
