"""Design field, solid/fluid switching, material blending, penalty and thresholding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Dual, Var
from .lattice import pairwise_sum


@dataclass
class DesignField:
    """Per-node fluid fraction ``w`` (1 fluid, 0 solid) and the mutable region."""

    w: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.w.shape != self.mask.shape:
            raise ValueError("design values and mask differ in shape")
        if np.any(self.w < 0) or np.any(self.w > 1):
            raise ValueError("design values must lie in [0, 1]")

    @classmethod
    def uniform(cls, mask, value=1.0, outside=1.0):
        mask = np.asarray(mask, dtype=bool)
        w = np.where(mask, value, outside).astype(float)
        return cls(w, mask)

    @property
    def values(self):
        """Design values restricted to the mask, in node order."""
        return self.w[self.mask]

    def with_values(self, values):
        w = self.w.copy()
        w[self.mask] = values
        return DesignField(w, self.mask.copy())

    def copy(self):
        return DesignField(self.w.copy(), self.mask.copy())


@dataclass(frozen=True)
class Switching:
    """Darcy switch ``G`` scaling the post-collision velocity.

    ``form="power"``:    ``G(w) = 1 - (1 - w)**theta``
    ``form="rational"``: ``G(w) = w (1 + q) / (w + q)`` (non-zero slope at ``w = 1``)
    """

    theta: float = 3.0
    form: str = "power"
    q: float = 0.1

    def __call__(self, w):
        if not isinstance(w, (Dual, Var)):
            w = _clamp_unit(w)
        if self.form == "power":
            return 1.0 - (1.0 - w) ** self.theta
        if self.form == "rational":
            return w * (1.0 + self.q) / (w + self.q)
        raise ValueError(f"unknown switching form {self.form!r}")

    def derivative(self, w):
        w = _clamp_unit(w)
        if self.form == "power":
            return self.theta * (1.0 - w) ** (self.theta - 1)
        return self.q * (1.0 + self.q) / (w + self.q) ** 2


DEFAULT_SWITCHING = Switching()


def _clamp_unit(w):
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or np.any(w > 1):
        warnings.warn("design value outside [0, 1] clamped", RuntimeWarning, stacklevel=3)
        w = np.clip(w, 0.0, 1.0)
    return w


def switching(w, theta=3.0):
    """``G(w) = 1 - (1 - w)**theta``; ``G(0) = 0`` (solid) and ``G(1) = 1`` (fluid)."""
    return Switching(theta)(w)


def switching_derivative(w, theta=3.0):
    return Switching(theta).derivative(w)


def diffusivity(w, beta_fluid, beta_solid):
    return w * beta_fluid + (1.0 - w) * beta_solid


def diffusivity_derivative(beta_fluid, beta_solid):
    return beta_fluid - beta_solid


def penalty(design: DesignField):
    """``P = sum w (1 - w)`` over the design region and ``dP/dw`` on every node."""
    w = design.w
    m = design.mask
    value = pairwise_sum(w[m] * (1.0 - w[m]))
    grad = np.where(m, 1.0 - 2.0 * w, 0.0)
    return value, grad


def apply_threshold(design: DesignField, eta):
    if not 0.0 <= eta <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    w = design.w.copy()
    m = design.mask
    w[m] = np.where(w[m] >= eta, 1.0, 0.0)
    return DesignField(w, m.copy())


def threshold_sweep(design: DesignField, eta_grid, evaluator):
    """Evaluate thresholded designs over ``eta_grid``; return ``(best_eta, curve)``.

    ``curve`` is a list of ``(eta, objective)``; failed evaluations are kept
    with ``objective = nan``. Ties go to the smallest ``eta``.
    """
    eta_grid = list(eta_grid)
    if not eta_grid:
        raise ValueError("empty threshold grid")
    curve = []
    for eta in eta_grid:
        try:
            val = float(evaluator(apply_threshold(design, eta)))
        except Exception as exc:  # non-converging evaluations are recorded, not fatal
            warnings.warn(f"threshold {eta}: evaluation failed ({exc})", RuntimeWarning, stacklevel=2)
            val = float("nan")
        curve.append((float(eta), val))
    best_eta, best = None, -np.inf
    for eta, val in curve:
        if np.isfinite(val) and val > best:
            best_eta, best = eta, val
    return best_eta, curve


def design_histogram(design: DesignField):
    """Fractions of design nodes in ``{0}, (0,0.9), [0.9,0.99), [0.99,1), {1}``."""
    v = design.values
    n = max(len(v), 1)
    return {
        "0": float(np.sum(v == 0.0)) / n,
        "(0,0.9)": float(np.sum((v > 0.0) & (v < 0.9))) / n,
        "[0.9,0.99)": float(np.sum((v >= 0.9) & (v < 0.99))) / n,
        "[0.99,1)": float(np.sum((v >= 0.99) & (v < 1.0))) / n,
        "1": float(np.sum(v == 1.0)) / n,
    }
