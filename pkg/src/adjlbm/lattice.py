"""Velocity sets, lattice geometry, node tags and periodic streaming.

Fields are stored structure-of-arrays: an array of shape ``(M, N)`` with one
row per density and the flat node index ``x + Lx * (y + Ly * z)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError

# fmt: off
_D3Q19_VELOCITIES = [
    (0, 0, 0),
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
    (1, 1, 0), (-1, 1, 0), (1, -1, 0), (-1, -1, 0),
    (1, 0, 1), (-1, 0, 1), (1, 0, -1), (-1, 0, -1),
    (0, 1, 1), (0, -1, 1), (0, 1, -1), (0, -1, -1),
]
# fmt: on


@dataclass(frozen=True, eq=False)
class LatticeDescriptor:
    """A velocity set with its weights and (optionally) an MRT moment matrix."""

    name: str
    velocities: np.ndarray
    weights: np.ndarray
    cs2: float
    moment_matrix: np.ndarray | None = None
    shear_moments: tuple = ()
    opposite: np.ndarray = field(init=False)

    def __post_init__(self):
        e = np.asarray(self.velocities, dtype=np.int64)
        object.__setattr__(self, "velocities", e)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        opp = np.empty(len(e), dtype=np.int64)
        for j, ej in enumerate(e):
            hits = np.flatnonzero((e == -ej).all(axis=1))
            if len(hits) != 1:
                raise ConfigurationError(f"{self.name}: velocity {ej} has no unique opposite")
            opp[j] = hits[0]
        object.__setattr__(self, "opposite", opp)
        if self.moment_matrix is not None:
            U = np.asarray(self.moment_matrix, dtype=float)
            if abs(np.linalg.det(U)) < 1e-12:
                raise ConfigurationError(f"{self.name}: moment matrix is singular")
            object.__setattr__(self, "moment_matrix", U)

    @property
    def q(self):
        return len(self.velocities)

    @property
    def dim(self):
        """Number of leading axes actually used by the velocity set."""
        used = np.flatnonzero(np.abs(self.velocities).sum(axis=0))
        return int(used.max()) + 1 if len(used) else 1

    def __repr__(self):
        return f"LatticeDescriptor({self.name})"


def _moment_rows(e, polys):
    cx, cy, cz = (e[:, 0].astype(float), e[:, 1].astype(float), e[:, 2].astype(float))
    c2 = cx * cx + cy * cy + cz * cz
    return np.array([p(cx, cy, cz, c2) for p in polys])


# d'Humieres et al. (2002) moment basis, rows as polynomials of the velocity
_D3Q19_MOMENTS = [
    lambda x, y, z, c2: np.ones_like(x),
    lambda x, y, z, c2: 19 * c2 - 30,
    lambda x, y, z, c2: (21 * c2 * c2 - 53 * c2 + 24) / 2,
    lambda x, y, z, c2: x,
    lambda x, y, z, c2: (5 * c2 - 9) * x,
    lambda x, y, z, c2: y,
    lambda x, y, z, c2: (5 * c2 - 9) * y,
    lambda x, y, z, c2: z,
    lambda x, y, z, c2: (5 * c2 - 9) * z,
    lambda x, y, z, c2: 3 * x * x - c2,
    lambda x, y, z, c2: (3 * c2 - 5) * (3 * x * x - c2),
    lambda x, y, z, c2: y * y - z * z,
    lambda x, y, z, c2: (3 * c2 - 5) * (y * y - z * z),
    lambda x, y, z, c2: x * y,
    lambda x, y, z, c2: y * z,
    lambda x, y, z, c2: x * z,
    lambda x, y, z, c2: (y * y - z * z) * x,
    lambda x, y, z, c2: (z * z - x * x) * y,
    lambda x, y, z, c2: (x * x - y * y) * z,
]

# Lallemand & Luo D2Q9 basis: rho, e, eps, jx, qx, jy, qy, pxx, pxy
_D2Q9_MOMENTS = [
    lambda x, y, z, c2: np.ones_like(x),
    lambda x, y, z, c2: -4 + 3 * c2,
    lambda x, y, z, c2: 4 - 10.5 * c2 + 4.5 * c2 * c2,
    lambda x, y, z, c2: x,
    lambda x, y, z, c2: (-5 + 3 * c2) * x,
    lambda x, y, z, c2: y,
    lambda x, y, z, c2: (-5 + 3 * c2) * y,
    lambda x, y, z, c2: x * x - y * y,
    lambda x, y, z, c2: x * y,
]


def _build(name):
    e19 = np.array(_D3Q19_VELOCITIES)
    if name == "D3Q19":
        w = np.array([1 / 3] + [1 / 18] * 6 + [1 / 36] * 12)
        U = _moment_rows(e19, _D3Q19_MOMENTS)
        return LatticeDescriptor(name, e19, w, 1 / 3, U, shear_moments=(9, 11, 13, 14, 15))
    if name == "D3Q7":
        w = np.array([1 / 4] + [1 / 8] * 6)
        return LatticeDescriptor(name, e19[:7], w, 1 / 4)
    if name == "D2Q9":
        e = e19[[0, 1, 2, 3, 4, 7, 8, 9, 10]]
        w = np.array([4 / 9] + [1 / 9] * 4 + [1 / 36] * 4)
        U = _moment_rows(e, _D2Q9_MOMENTS)
        return LatticeDescriptor(name, e, w, 1 / 3, U, shear_moments=(7, 8))
    if name == "D2Q5":
        w = np.array([1 / 3] + [1 / 6] * 4)
        return LatticeDescriptor(name, e19[:5], w, 1 / 3)
    raise ConfigurationError(f"unknown lattice descriptor {name!r}")


@lru_cache(maxsize=None)
def descriptor(name: str) -> LatticeDescriptor:
    """Return the named descriptor (``D2Q9``, ``D2Q5``, ``D3Q19`` or ``D3Q7``)."""
    return _build(name)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeShape:
    Lx: int
    Ly: int = 1
    Lz: int = 1

    def __post_init__(self):
        for n in (self.Lx, self.Ly, self.Lz):
            if int(n) != n or n < 1:
                raise ConfigurationError(f"lattice dimensions must be positive integers, got {self}")

    @property
    def n_nodes(self) -> int:
        return self.Lx * self.Ly * self.Lz

    @property
    def dims(self):
        return (self.Lx, self.Ly, self.Lz)

    def index(self, x, y=0, z=0):
        return np.asarray(x) + self.Lx * (np.asarray(y) + self.Ly * np.asarray(z))

    def coords(self):
        """Integer coordinates ``(x, y, z)`` of every node, each of length ``N``."""
        n = np.arange(self.n_nodes)
        return n % self.Lx, (n // self.Lx) % self.Ly, n // (self.Lx * self.Ly)


@lru_cache(maxsize=64)
def _stream_source(dims, velocities):
    """Flat gather index ``src`` such that ``(S f).ravel() = f.ravel()[src]``."""
    Lx, Ly, Lz = dims
    n = Lx * Ly * Lz
    node = np.arange(n)
    x, y, z = node % Lx, (node // Lx) % Ly, node // (Lx * Ly)
    rows = []
    for j, (ex, ey, ez) in enumerate(velocities):
        # (S f)_j(x) = f_j(x - e_j)
        src = ((x - ex) % Lx) + Lx * (((y - ey) % Ly) + Ly * ((z - ez) % Lz))
        rows.append(src + j * n)
    out = np.concatenate(rows)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def _reverse_source(dims, velocities):
    src = _stream_source(dims, velocities)
    inv = np.empty_like(src)
    inv[src] = np.arange(len(src))
    inv.setflags(write=False)
    return inv


def _check(f, velocities, shape):
    velocities = np.asarray(velocities)
    if f.ndim != 2 or f.shape[0] != len(velocities):
        raise ConfigurationError(
            f"field has {f.shape[0] if f.ndim else 0} densities but the velocity set has {len(velocities)}"
        )
    if f.shape[1] != shape.n_nodes:
        raise ConfigurationError(f"field has {f.shape[1]} nodes, lattice {shape} has {shape.n_nodes}")
    return tuple(map(tuple, velocities.tolist()))


def _velocities(d):
    return d.velocities if isinstance(d, LatticeDescriptor) else d


def _gather(f, src, out):
    flat = np.ravel(f, order="C")
    if out is None:
        return np.take(flat, src).reshape(f.shape)
    if out.flags.c_contiguous:
        np.take(flat, src, out=out.reshape(-1))
    else:
        out[...] = np.take(flat, src).reshape(f.shape)
    return out


def stream(f, velocities, shape: LatticeShape, out=None):
    """Periodic streaming: ``out_j(x + e_j) = f_j(x)``.

    ``velocities`` is a descriptor or an ``(M, 3)`` integer array (for coupled
    models, the stacked velocity sets of all sub-lattices).
    """
    key = _check(f, _velocities(velocities), shape)
    src = _stream_source(shape.dims, key)
    return _gather(f, src, out)


def reverse_stream(v, velocities, shape: LatticeShape, out=None):
    """Inverse of :func:`stream`: ``out_k(x - e_k) = v_k(x)``."""
    key = _check(v, _velocities(velocities), shape)
    src = _reverse_source(shape.dims, key)
    return _gather(v, src, out)


def pairwise_sum(a):
    """Sum with a fixed pairwise tree; the order depends only on ``a.size``."""
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.size == 0:
        return 0.0
    while a.size > 1:
        if a.size % 2:
            a = np.append(a, 0.0)
        a = a[0::2] + a[1::2]
    return float(a[0])


def total_density_sum(f) -> float:
    """Sum of every density at every node (deterministic reduction order)."""
    return pairwise_sum(f)


def inner(a, b) -> float:
    """Scalar product ``<a, b> = sum_{x, i} a_i(x) b_i(x)``."""
    return pairwise_sum(np.asarray(a) * np.asarray(b))


# ---------------------------------------------------------------------------
# node tags
# ---------------------------------------------------------------------------


class NodeTag(enum.IntEnum):
    INTERIOR = 0
    WALL = 1
    PRESSURE_INLET = 2
    PRESSURE_OUTLET = 3
    HEATER = 4


@dataclass
class NodeTagMap:
    """Per-node primary tag plus the static per-node boundary data.

    ``normal`` holds the inward unit normal of pressure nodes, ``temperature``
    the prescribed temperature at inlet and heater nodes (NaN elsewhere means
    "not prescribed"), ``rho_outlet`` the outlet density target.
    """

    shape: LatticeShape
    tag: np.ndarray
    design: np.ndarray
    normal: np.ndarray
    temperature: np.ndarray
    rho_outlet: float = 1.0

    @classmethod
    def empty(cls, shape: LatticeShape):
        n = shape.n_nodes
        return cls(
            shape,
            np.zeros(n, dtype=np.int8),
            np.zeros(n, dtype=bool),
            np.zeros((n, 3), dtype=np.int64),
            np.full(n, np.nan),
        )

    def validate(self):
        n = self.shape.n_nodes
        if self.tag.shape != (n,) or self.design.shape != (n,):
            raise ConfigurationError("tag map arrays do not match the lattice size")
        if np.any(self.design & (self.tag != NodeTag.INTERIOR)):
            raise ConfigurationError("design-region flag set on a non-interior node")
        pressure = np.isin(self.tag, (NodeTag.PRESSURE_INLET, NodeTag.PRESSURE_OUTLET))
        nrm = np.abs(self.normal[pressure])
        if len(nrm) and not np.all((nrm.sum(axis=1) == 1) & (nrm.max(axis=1) == 1)):
            raise ConfigurationError("pressure nodes need an axis-aligned unit normal")
        return self

    def groups(self):
        """Nodes grouped by ``(tag, normal)`` for vectorised collision.

        Returns a list of ``(tag, normal_tuple, index_array)`` in a fixed order.
        """
        out = []
        for t in NodeTag:
            idx = np.flatnonzero(self.tag == t)
            if not len(idx):
                continue
            if t in (NodeTag.PRESSURE_INLET, NodeTag.PRESSURE_OUTLET):
                normals = self.normal[idx]
                for nrm in sorted({tuple(r) for r in normals.tolist()}):
                    sel = idx[(normals == nrm).all(axis=1)]
                    out.append((t, nrm, sel))
            else:
                out.append((t, None, idx))
        return out

    def subset(self, nodes, shape: LatticeShape):
        """Tag map restricted to ``nodes`` (flat indices) living on ``shape``."""
        return NodeTagMap(
            shape,
            self.tag[nodes].copy(),
            self.design[nodes].copy(),
            self.normal[nodes].copy(),
            self.temperature[nodes].copy(),
            self.rho_outlet,
        )


def write_density_csv(path, f, shape: LatticeShape):
    """Dump ``x,y,z,f_1..f_M`` with one row per node."""
    x, y, z = shape.coords()
    m = f.shape[0]
    header = "x,y,z," + ",".join(f"f_{j + 1}" for j in range(m))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for n in range(shape.n_nodes):
            vals = ",".join(f"{v:.17g}" for v in f[:, n])
            fh.write(f"{x[n]},{y[n]},{z[n]},{vals}\n")


def read_density_csv(path, shape: LatticeShape):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = shape.index(data[:, 0].astype(int), data[:, 1].astype(int), data[:, 2].astype(int))
    f = np.empty((data.shape[1] - 3, shape.n_nodes))
    f[:, idx] = data[:, 3:].T
    return f
