"""Outlet-flux objectives, their exact density partials and penalty composites.

Maximisation convention throughout: the composite objective is
``sum_x F^x(f(x)) - penalty_weight * P(w)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .lattice import pairwise_sum
from .topology import DesignField, penalty

KINDS = ("MixingFlux", "HeatFlux", "Synthetic")


@dataclass
class ObjectiveSpec:
    """Objective kind, the nodes it is summed over and the flux direction.

    ``normal`` is the outward flux direction (``+x`` for an outlet at the
    right end). ``coefficients`` is only used by the linear ``Synthetic`` kind:
    ``F^x = coefficients . f(x)``.
    """

    kind: str
    support: np.ndarray
    normal: tuple = (1, 0, 0)
    penalty_weight: float = 0.0
    coefficients: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown objective kind {self.kind!r}")
        self.support = np.asarray(self.support, dtype=np.int64)
        if self.kind != "Synthetic" and not len(self.support):
            raise ConfigurationError("flux objectives need a non-empty support")
        if not np.isfinite(self.penalty_weight):
            raise ConfigurationError("penalty weight must be finite")


def _flux_parts(f_local, model, normal):
    qf = model.flow.q
    f, g = f_local[:qf], f_local[qf:]
    en = model.flow.velocities @ np.asarray(normal)
    rho = f.sum(axis=0)
    un = (en @ f) / rho
    T = g.sum(axis=0)
    return en, rho, un, T


def node_term(spec: ObjectiveSpec, f_local, model):
    """Per-node summand evaluated on ``f_local`` of shape ``(M, n)``."""
    f_local = np.asarray(f_local, dtype=float)
    if spec.kind == "Synthetic":
        return np.asarray(spec.coefficients, dtype=float) @ f_local
    _, _, un, T = _flux_parts(f_local, model, spec.normal)
    if spec.kind == "MixingFlux":
        return un * (1.0 - T * T)
    return un * T


def node_partial(spec: ObjectiveSpec, f_local, model):
    """Exact ``dF^x/df_k`` for every column of ``f_local``; shape ``(M, n)``."""
    f_local = np.asarray(f_local, dtype=float)
    if spec.kind == "Synthetic":
        c = np.asarray(spec.coefficients, dtype=float)
        return np.repeat(c[:, None], f_local.shape[1], axis=1)
    qf = model.flow.q
    en, rho, un, T = _flux_parts(f_local, model, spec.normal)
    dun_df = (en[:, None] - un[None, :]) / rho[None, :]
    out = np.empty_like(f_local)
    if spec.kind == "MixingFlux":
        out[:qf] = dun_df * (1.0 - T * T)
        out[qf:] = -2.0 * un * T
    else:
        out[:qf] = dun_df * T
        out[qf:] = un
    return out


def objective_partials(spec: ObjectiveSpec, f, model):
    """Full-lattice array of ``dF^x/df_k``; zero off the support."""
    out = np.zeros_like(f)
    out[:, spec.support] = node_partial(spec, f[:, spec.support], model)
    return out


def raw_objective(spec: ObjectiveSpec, f, model) -> float:
    return pairwise_sum(node_term(spec, f[:, spec.support], model))


def evaluate(spec: ObjectiveSpec, f, design: DesignField | None, model, penalty_weight=None) -> float:
    """``sum_x F^x - weight * P``; the penalty term is skipped when the weight is zero."""
    value = raw_objective(spec, f, model)
    weight = spec.penalty_weight if penalty_weight is None else penalty_weight
    if weight and design is not None:
        value -= weight * penalty(design)[0]
    return value


def outlet_report(spec: ObjectiveSpec, f, model):
    """Mean and standard deviation of normal velocity and temperature on the support."""
    _, _, un, T = _flux_parts(f[:, spec.support], model, spec.normal)
    return {
        "u_mean": float(un.mean()),
        "u_sd": float(un.std()),
        "T_mean": float(T.mean()),
        "T_sd": float(T.std()),
    }


@dataclass
class PenaltySchedule:
    """Exponential continuation ``w0 * rate**((it - start) / interval)`` capped at ``w_max``."""

    w0: float = 0.0
    rate: float = 10.0
    interval: int = 1000
    start: int = 0
    w_max: float = np.inf

    def __post_init__(self):
        if self.w0 < 0 or self.interval <= 0:
            raise ConfigurationError("penalty schedule needs w0 >= 0 and interval > 0")
        if self.rate < 1.0 or (self.rate == 1.0 and self.w_max > self.w0 and np.isfinite(self.w_max)):
            raise ConfigurationError("penalty rate must exceed 1 for the cap to be reachable")

    def __call__(self, iteration):
        return penalty_schedule(iteration, self)


def penalty_schedule(iteration, config: PenaltySchedule) -> float:
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if iteration < config.start or config.w0 == 0.0:
        return 0.0
    w = config.w0 * config.rate ** ((iteration - config.start) / config.interval)
    return float(min(w, config.w_max))
