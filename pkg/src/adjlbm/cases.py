"""Channel geometries: tag maps for the mixer and heat-exchanger set-ups."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collision import ModelSpec, initial_state
from .errors import ConfigurationError
from .lattice import LatticeShape, NodeTag, NodeTagMap
from .objective import ObjectiveSpec
from .topology import DesignField


@dataclass
class Case:
    """Everything a solve needs: lattice, model, tags, design and objective."""

    shape: LatticeShape
    model: ModelSpec
    tags: NodeTagMap
    design: DesignField
    objective: ObjectiveSpec

    def initial_state(self):
        return initial_state(self.model, self.shape)

    @property
    def design_nodes(self):
        return np.flatnonzero(self.design.mask)


def channel_tags(
    shape: LatticeShape,
    wall_axes="y",
    inlet_temperature="uniform",
    inlet_T=0.0,
    heater=None,
    design_span=None,
    rho_outlet=1.0,
):
    """Channel along ``x`` with walls on the faces normal to ``wall_axes``.

    * inlet column ``x = 0`` (normal ``+x``), outlet column ``x = Lx - 1``;
    * ``inlet_temperature``: ``"uniform"`` (``inlet_T`` everywhere) or
      ``"split"`` (``-1`` below the mid-height, ``+1`` from it on);
    * ``heater``: ``(x0, x1)`` or ``(x0, x1, z0, z1)`` inclusive span on the
      bottom wall ``y = 0`` with prescribed temperature 1;
    * ``design_span``: inclusive ``(x0, x1)``; interior nodes in it form the
      design region.
    """
    tags = NodeTagMap.empty(shape)
    x, y, z = shape.coords()
    wall = np.zeros(shape.n_nodes, dtype=bool)
    if "y" in wall_axes:
        wall |= (y == 0) | (y == shape.Ly - 1)
    if "z" in wall_axes:
        wall |= (z == 0) | (z == shape.Lz - 1)
    tags.tag[wall] = NodeTag.WALL

    inlet = (x == 0) & ~wall
    outlet = (x == shape.Lx - 1) & ~wall
    tags.tag[inlet] = NodeTag.PRESSURE_INLET
    tags.normal[inlet] = (1, 0, 0)
    tags.tag[outlet] = NodeTag.PRESSURE_OUTLET
    tags.normal[outlet] = (-1, 0, 0)
    if inlet_temperature == "split":
        tags.temperature[inlet] = np.where(y[inlet] < shape.Ly // 2, -1.0, 1.0)
    elif inlet_temperature == "uniform":
        tags.temperature[inlet] = float(inlet_T)
    else:
        raise ConfigurationError(f"unknown inlet temperature profile {inlet_temperature!r}")

    if heater is not None:
        x0, x1 = heater[0], heater[1]
        sel = (y == 0) & (x >= x0) & (x <= x1)
        if len(heater) == 4:
            sel &= (z >= heater[2]) & (z <= heater[3])
        if not np.any(sel):
            raise ConfigurationError("heater span selects no nodes")
        tags.tag[sel] = NodeTag.HEATER
        tags.temperature[sel] = 1.0

    if design_span is not None:
        x0, x1 = design_span
        if not (0 < x0 <= x1 < shape.Lx - 1):
            raise ConfigurationError(f"design span {design_span} outside the channel interior")
        tags.design[:] = (tags.tag == NodeTag.INTERIOR) & (x >= x0) & (x <= x1)
    tags.rho_outlet = rho_outlet
    return tags.validate()


def outlet_support(shape: LatticeShape, tags: NodeTagMap):
    """Interior nodes of the last column before the outlet (flux plane)."""
    x, _, _ = shape.coords()
    return np.flatnonzero((x == shape.Lx - 2) & (tags.tag == NodeTag.INTERIOR))


def fin_design(shape: LatticeShape, tags: NodeTagMap, n_fins, width, height=None, gap=3):
    """Binary design with ``n_fins`` evenly spaced vertical fins of ``width`` nodes.

    Fins stand on the bottom wall inside the design region and reach ``height``
    nodes up (default: two thirds of the channel height).
    """
    x, y, _ = shape.coords()
    mask = tags.design
    if not np.any(mask):
        raise ConfigurationError("fin preset needs a design region")
    xs = x[mask]
    x0, x1 = int(xs.min()), int(xs.max())
    span = x1 - x0 + 1
    if n_fins * width + (n_fins - 1) * gap > span:
        raise ConfigurationError(f"{n_fins} fins of width {width} with gap {gap} do not fit in {span} nodes")
    height = (2 * (shape.Ly - 2)) // 3 if height is None else height
    pitch = span / n_fins
    w = np.where(mask, 1.0, 1.0)
    for k in range(n_fins):
        left = x0 + int(round((k + 0.5) * pitch - width / 2))
        solid = mask & (x >= left) & (x < left + width) & (y <= height)
        w[solid] = 0.0
    return DesignField(w, mask.copy())


def poiseuille_deviation(f, model, shape: LatticeShape, x=None):
    """Max deviation of ``u_x(y)`` at column ``x`` from the plane-Poiseuille parabola.

    The analytic profile uses the pressure gradient measured around ``x``
    (``p = cs2 rho``), the dynamic viscosity ``rho nu`` with ``nu`` recovered
    from the relaxation rate, and bounce-back walls half-way between the wall
    nodes and the first fluid nodes.  Returns ``(relative_deviation, u_lbm,
    u_exact)`` with the deviation normalised by the analytic peak.
    """
    from .collision import macroscopic, viscosity_from_omega

    Lx, Ly = shape.Lx, shape.Ly
    x = Lx // 2 if x is None else x
    m = macroscopic(f, model)
    ux = m.u[0].reshape(shape.Lz, Ly, Lx)[0]
    p = model.flow.cs2 * m.rho.reshape(shape.Lz, Ly, Lx)[0]
    dpdx = np.mean(p[1:-1, x + 1] - p[1:-1, x - 1]) / 2.0
    y = np.arange(1, Ly - 1, dtype=float)
    y0, y1 = 0.5, Ly - 1.5
    mu = viscosity_from_omega(model.omega) * m.rho.reshape(shape.Lz, Ly, Lx)[0][1:-1, x]
    exact = -dpdx / (2.0 * mu) * (y - y0) * (y1 - y)
    lbm = ux[1:-1, x]
    return float(np.max(np.abs(lbm - exact)) / np.max(exact)), lbm, exact
