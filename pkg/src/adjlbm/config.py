"""Case configuration files: a sectioned ``key = value`` format.

Example::

    [lattice]
    Lx = 90
    Ly = 20

    [model]
    nu = 0.02

Blank lines and ``#`` comments are ignored.  Every key has a default (see the
dataclasses below); unknown sections or keys, malformed values and violated
invariants raise :class:`ConfigurationError` naming the file, line and key.
:func:`serialize` writes every key, so ``parse(serialize(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .cases import Case, channel_tags, fin_design, outlet_support
from .collision import ModelSpec
from .errors import ConfigurationError
from .lattice import LatticeShape, NodeTag
from .objective import ObjectiveSpec, PenaltySchedule
from .topology import DesignField, Switching


@dataclass
class LatticeSection:
    Lx: int = 90
    Ly: int = 20
    Lz: int = 1
    flow: str = "D2Q9"
    thermal: str = "D2Q9"
    precision: int = 64


@dataclass
class ModelSection:
    nu: float = 0.02
    beta_fluid: float = 0.003
    beta_solid: float = 0.003
    inlet_dp: float = 0.016666
    u_clamp: float = 0.05
    mode: str = "MRT"
    ghost_relaxation: float = 1.0
    switching: str = "power"
    theta: float = 3.0
    switching_q: float = 0.1


@dataclass
class TagsSection:
    walls: str = "y"
    inlet_temperature: str = "split"
    inlet_T: float = 0.0
    heater: tuple | None = None
    design_span: tuple | None = None
    rho_outlet: float = 1.0
    initial_w: float = 1.0
    initial_w_jitter: float = 0.0
    fins: tuple | None = None
    design_file: str = ""


@dataclass
class ObjectiveSection:
    kind: str = "MixingFlux"
    penalty_w0: float = 0.0
    penalty_rate: float = 10.0
    penalty_interval: int = 1000
    penalty_start: int = 0
    penalty_max: float = float("inf")


@dataclass
class OptimizerSection:
    method: str = "oneshot"
    zeta: list = field(default_factory=lambda: [(0, 1.0)])
    iterations: int = 10000
    snapshot_interval: int = 100
    normalize: bool = False
    outer_iterations: int = 20
    stop_change: float = 0.0
    move: float = 0.2
    adjoint_mode: str = "equal"
    tol: float = 1e-10
    max_iter: int = 200000
    workers: int = 1
    seed: int = 0
    eta_grid: tuple = (0.05, 0.95, 19)
    grad_components: int = 10
    fd_steps: tuple = (1e-5, 1e-6, 1e-7)


@dataclass
class OutputSection:
    directory: str = "out"
    prefix: str = "run"
    vtk: bool = True
    snapshot_every: int = 0


SECTIONS = {
    "lattice": LatticeSection,
    "model": ModelSection,
    "tags": TagsSection,
    "objective": ObjectiveSection,
    "optimizer": OptimizerSection,
    "output": OutputSection,
}


@dataclass
class CaseConfig:
    lattice: LatticeSection = field(default_factory=LatticeSection)
    model: ModelSection = field(default_factory=ModelSection)
    tags: TagsSection = field(default_factory=TagsSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: str = field(default="", compare=False)

    @property
    def shape(self):
        return LatticeShape(self.lattice.Lx, self.lattice.Ly, self.lattice.Lz)


# ---------------------------------------------------------------------------
# value codecs
# ---------------------------------------------------------------------------


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int(text):
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _parse_ints(text):
    if text.lower() in ("none", ""):
        return None
    return tuple(_parse_int(t) for t in text.replace(",", " ").split())


def _parse_stages(text):
    """``0.5`` or ``0:0.5, 5000:1.0`` (start iteration : zeta)."""
    stages = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:
            start, value = part.split(":", 1)
            stages.append((_parse_int(start), float(value)))
        else:
            stages.append((0, float(part)))
    return stages


def _parse_floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _codec(section, name):
    """``(parse, format)`` for one key, chosen by the key's default type."""
    default = {f.name: f for f in dataclasses.fields(SECTIONS[section])}[name]
    if name == "zeta":
        return _parse_stages, lambda v: ", ".join(f"{s}:{_fmt_float(z)}" for s, z in v)
    if name in ("heater", "design_span", "fins"):
        return _parse_ints, lambda v: "none" if v is None else " ".join(str(i) for i in v)
    if name == "eta_grid":
        def parse_grid(text):
            a, b, n = text.replace(",", " ").split()
            return (float(a), float(b), _parse_int(n))
        return parse_grid, lambda v: f"{_fmt_float(v[0])} {_fmt_float(v[1])} {v[2]}"
    if name == "fd_steps":
        return _parse_floats, lambda v: " ".join(_fmt_float(x) for x in v)
    kind = default.type if isinstance(default.type, type) else {"int": int, "float": float, "str": str, "bool": bool}.get(default.type, str)
    if kind is bool:
        return _parse_bool, lambda v: "true" if v else "false"
    if kind is int:
        return _parse_int, str
    if kind is float:
        return float, _fmt_float
    return str, str


def _fmt_float(v):
    v = float(v)
    if v == float("inf"):
        return "inf"
    return repr(v)


# ---------------------------------------------------------------------------
# parse / serialize
# ---------------------------------------------------------------------------


def parse_text(text, source="<string>"):
    cfg = CaseConfig(source=source)
    section = None
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigurationError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigurationError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigurationError(f"{where}: expected 'key = value', got {line!r}")
        if section is None:
            raise ConfigurationError(f"{where}: key outside of any section")
        key, value = (t.strip() for t in line.split("=", 1))
        names = {f.name for f in dataclasses.fields(SECTIONS[section])}
        if key not in names:
            raise ConfigurationError(f"{where}: unknown key {key!r} in [{section}]")
        if (section, key) in seen:
            raise ConfigurationError(f"{where}: duplicate key {key!r} (first set on line {seen[section, key]})")
        seen[section, key] = lineno
        parse, _ = _codec(section, key)
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigurationError(f"{where}: bad value for [{section}] {key}: {exc}") from None
        setattr(getattr(cfg, section), key, parsed)
    try:
        validate(cfg)
    except ConfigurationError as exc:
        key = getattr(exc, "key", None)
        line = next((ln for (sec, k), ln in seen.items() if (sec, k) == key), None)
        loc = f"{source}:{line}" if line else source
        raise ConfigurationError(f"{loc}: {exc}") from None
    return cfg


def parse_config(path) -> CaseConfig:
    """Read and validate a configuration file; ``preset:NAME`` loads a bundled preset."""
    path = os.fspath(path)
    if path.startswith("preset:"):
        return parse_text(preset_text(path[len("preset:"):]), source=path)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read configuration {path!r}: {exc.strerror}") from exc
    return parse_text(text, source=path)


def serialize(cfg: CaseConfig) -> str:
    out = []
    for name in SECTIONS:
        out.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            _, fmt = _codec(name, f.name)
            out.append(f"{f.name} = {fmt(getattr(sec, f.name))}")
        out.append("")
    return "\n".join(out)


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("adjlbm.presets").iterdir() if p.name.endswith(".cfg"))


def preset_text(name):
    res = resources.files("adjlbm.presets").joinpath(f"{name}.cfg")
    if not res.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return res.read_text()


# ---------------------------------------------------------------------------
# validation and case construction
# ---------------------------------------------------------------------------


def _fail(section, key, message):
    exc = ConfigurationError(f"[{section}] {key}: {message}")
    exc.key = (section, key)
    raise exc


def validate(cfg: CaseConfig):
    lat, mod, tg, ob, op = cfg.lattice, cfg.model, cfg.tags, cfg.objective, cfg.optimizer
    for k in ("Lx", "Ly", "Lz"):
        if getattr(lat, k) < 1:
            _fail("lattice", k, "must be at least 1")
    if lat.Lx < 4 or lat.Ly < 3:
        _fail("lattice", "Lx", "channel needs Lx >= 4 and Ly >= 3")
    if lat.flow not in ("D2Q9", "D3Q19"):
        _fail("lattice", "flow", f"unsupported flow lattice {lat.flow!r}")
    if lat.thermal not in ("D2Q9", "D2Q5", "D3Q7", "D3Q19"):
        _fail("lattice", "thermal", f"unsupported thermal lattice {lat.thermal!r}")
    if lat.flow.startswith("D2") and lat.Lz != 1:
        _fail("lattice", "Lz", "2D lattices need Lz = 1")
    if lat.precision != 64:
        _fail("lattice", "precision", "only 64-bit floating point is implemented")
    for k in ("nu", "u_clamp", "theta"):
        if not getattr(mod, k) > 0:
            _fail("model", k, f"must be positive, got {getattr(mod, k)}")
    for k in ("beta_fluid", "beta_solid"):
        if not getattr(mod, k) >= 0:
            _fail("model", k, f"must be non-negative, got {getattr(mod, k)}")
    if mod.mode not in ("MRT", "BGK"):
        _fail("model", "mode", f"unknown collision mode {mod.mode!r}")
    if mod.switching not in ("power", "rational"):
        _fail("model", "switching", f"unknown switching form {mod.switching!r}")
    if not 0 < mod.ghost_relaxation < 2:
        _fail("model", "ghost_relaxation", "must lie in (0, 2)")
    if tg.walls not in ("y", "yz"):
        _fail("tags", "walls", "must be 'y' or 'yz'")
    if tg.walls == "yz" and lat.Lz < 3:
        _fail("tags", "walls", "z walls need Lz >= 3")
    if tg.inlet_temperature not in ("uniform", "split"):
        _fail("tags", "inlet_temperature", "must be 'uniform' or 'split'")
    if tg.design_span is not None:
        if len(tg.design_span) != 2 or not 0 < tg.design_span[0] <= tg.design_span[1] < lat.Lx - 1:
            _fail("tags", "design_span", f"{tg.design_span} must be 'x0 x1' with 0 < x0 <= x1 < Lx - 1")
    if tg.heater is not None:
        if ob.kind != "HeatFlux":
            _fail("tags", "heater", "a heater is only meaningful for HeatFlux objectives")
        if len(tg.heater) not in (2, 4) or not 0 < tg.heater[0] <= tg.heater[1] < lat.Lx - 1:
            _fail("tags", "heater", f"{tg.heater} must be 'x0 x1' or 'x0 x1 z0 z1' inside the channel")
    if not 0 <= tg.initial_w <= 1:
        _fail("tags", "initial_w", "must lie in [0, 1]")
    if not 0 <= tg.initial_w_jitter <= tg.initial_w:
        _fail("tags", "initial_w_jitter", "must lie in [0, initial_w]")
    if cfg.output.snapshot_every < 0:
        _fail("output", "snapshot_every", "must be non-negative")
    if tg.fins is not None and len(tg.fins) != 2:
        _fail("tags", "fins", "expects 'count width'")
    if not tg.rho_outlet > 0:
        _fail("tags", "rho_outlet", "must be positive")
    if ob.kind not in ("MixingFlux", "HeatFlux"):
        _fail("objective", "kind", "must be MixingFlux or HeatFlux")
    if ob.penalty_w0 < 0 or ob.penalty_interval <= 0 or ob.penalty_rate < 1:
        _fail("objective", "penalty_w0", "penalty schedule needs w0 >= 0, interval > 0, rate >= 1")
    if op.method not in ("oneshot", "mma"):
        _fail("optimizer", "method", "must be 'oneshot' or 'mma'")
    if any(z < 0 for _, z in op.zeta) or not op.zeta or op.zeta[0][0] != 0:
        _fail("optimizer", "zeta", "stages must be non-negative and start at iteration 0")
    for k in ("iterations", "snapshot_interval", "max_iter", "workers", "grad_components"):
        if getattr(op, k) < (0 if k == "iterations" else 1):
            _fail("optimizer", k, "out of range")
    if not op.tol > 0:
        _fail("optimizer", "tol", "must be positive")
    if not op.stop_change >= 0:
        _fail("optimizer", "stop_change", "must be non-negative")
    if not 0 < op.move <= 1:
        _fail("optimizer", "move", "must lie in (0, 1]")
    if op.adjoint_mode not in ("equal", "tol"):
        _fail("optimizer", "adjoint_mode", "must be 'equal' or 'tol'")
    if op.workers > lat.Lx:
        _fail("optimizer", "workers", "more workers than x columns")
    a, b, n = op.eta_grid
    if not (0 <= a <= b <= 1 and n >= 1):
        _fail("optimizer", "eta_grid", "needs 0 <= start <= stop <= 1 and count >= 1")
    if not op.fd_steps or any(h <= 0 for h in op.fd_steps):
        _fail("optimizer", "fd_steps", "steps must be positive")
    try:
        PenaltySchedule(ob.penalty_w0, ob.penalty_rate, ob.penalty_interval, ob.penalty_start, ob.penalty_max)
    except ConfigurationError as exc:
        _fail("objective", "penalty_rate", str(exc))
    return cfg


def model_spec(cfg: CaseConfig) -> ModelSpec:
    m = cfg.model
    return ModelSpec(
        flow=cfg.lattice.flow,
        thermal=cfg.lattice.thermal,
        nu=m.nu,
        beta_fluid=m.beta_fluid,
        beta_solid=m.beta_solid,
        inlet_dp=m.inlet_dp,
        u_clamp=m.u_clamp,
        mode=m.mode,
        ghost_relaxation=m.ghost_relaxation,
        switching=Switching(m.theta, m.switching, m.switching_q),
    )


def penalty_schedule(cfg: CaseConfig) -> PenaltySchedule:
    o = cfg.objective
    return PenaltySchedule(o.penalty_w0, o.penalty_rate, o.penalty_interval, o.penalty_start, o.penalty_max)


def build_case(cfg: CaseConfig, design: DesignField | None = None) -> Case:
    """Lattice, model, tag map, initial design and objective described by ``cfg``."""
    from .io import read_design

    shape = cfg.shape
    tg = cfg.tags
    tags = channel_tags(
        shape,
        wall_axes=tg.walls,
        inlet_temperature=tg.inlet_temperature,
        inlet_T=tg.inlet_T,
        heater=tg.heater,
        design_span=tg.design_span,
        rho_outlet=tg.rho_outlet,
    )
    if design is None:
        if tg.design_file:
            path = tg.design_file
            if cfg.source and not os.path.isabs(path) and not cfg.source.startswith("preset:"):
                path = os.path.join(os.path.dirname(cfg.source), path)
            design = read_design(path, shape)
        elif tg.fins is not None:
            design = fin_design(shape, tags, tg.fins[0], tg.fins[1])
        else:
            design = DesignField.uniform(tags.design, tg.initial_w)
            if tg.initial_w_jitter > 0:
                rng = np.random.default_rng(cfg.optimizer.seed)
                n = int(design.mask.sum())
                design.w[design.mask] = tg.initial_w - tg.initial_w_jitter * rng.random(n)
    if design.w.shape != (shape.n_nodes,):
        raise ConfigurationError("design file does not match the lattice")
    support = outlet_support(shape, tags)
    objective = ObjectiveSpec(cfg.objective.kind, support, normal=(1, 0, 0))
    return Case(shape, model_spec(cfg), tags, design, objective)


def heater_nodes(case: Case):
    return np.flatnonzero(case.tags.tag == NodeTag.HEATER)
