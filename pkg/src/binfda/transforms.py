"""Maps between constrained curve spaces and unconstrained L2 curves.

Warps go to zero-mean curves through the centered log-ratio (CLR) of their
derivative; probability curves go to the real line through the logit. Every
integral is a trapezoidal sum on the working grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from binfda import diagnostics
from binfda.basis import Warp
from binfda.errors import InvalidWarp, NonPositiveDerivative
from binfda.fdcore import Grid

LOGIT_EPS = 1e-6
EXP_BOUND = 700.0


@dataclass(frozen=True, eq=False)
class ClrCurve:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape[-1] != self.grid.n_points:
            raise ValueError("CLR values do not match the grid")
        worst = np.max(np.abs(self.grid.integrate(v)))
        if worst > 1e-8:
            raise ValueError(f"CLR curve does not integrate to 0 (off by {worst:.2e})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _grid_for(values, grid: Grid | None) -> Grid:
    n = np.shape(values)[-1]
    if grid is None:
        return Grid(n)
    if grid.n_points != n:
        raise ValueError(f"{n} values given for a {grid.n_points}-point grid")
    return grid


def clr_forward(warp_derivative, grid: Grid | None = None) -> ClrCurve:
    """Centered log of a positive warp derivative.

    Works on a single curve or on a stack of curves (rows); the returned
    :class:`ClrCurve` keeps the same shape.
    """
    d = np.asarray(warp_derivative, dtype=float)
    grid = _grid_for(d, grid)
    if not np.all(d > 0):
        raise NonPositiveDerivative("warp derivative must be positive everywhere")
    logd = np.log(d)
    eta = logd - grid.integrate(logd)[..., None]
    # remove the last rounding residue of the centering
    eta = eta - grid.integrate(eta)[..., None]
    return ClrCurve(grid, eta)


def clr_inverse(eta, grid: Grid | None = None) -> np.ndarray:
    """Warp values ``int_0^s exp(eta) / int_0^1 exp(eta)`` by cumulative trapezoid."""
    values = eta.values if isinstance(eta, ClrCurve) else np.asarray(eta, dtype=float)
    if isinstance(eta, ClrCurve) and grid is None:
        grid = eta.grid
    grid = _grid_for(values, grid)
    if not np.all(np.isfinite(values)):
        raise ValueError("CLR values must be finite")
    clamped = np.clip(values, -EXP_BOUND, EXP_BOUND)
    diagnostics.record("clr_inverse_clamp", int(np.count_nonzero(clamped != values)))
    dens = np.exp(clamped - clamped.max(axis=-1, keepdims=True))
    cells = 0.5 * grid.spacing * (dens[..., 1:] + dens[..., :-1])
    cum = np.concatenate([np.zeros(dens.shape[:-1] + (1,)), np.cumsum(cells, axis=-1)], axis=-1)
    gamma = cum / cum[..., -1:]
    gamma[..., -1] = 1.0
    return gamma


def warp_derivative(warp: Warp, grid: Grid) -> np.ndarray:
    """Analytic derivative of a spline warp on the grid."""
    d = warp.derivative(grid.points)
    if not np.all(d > 0):
        raise InvalidWarp("warp derivative is not positive on the whole grid")
    return d


def logit(mu, eps: float = LOGIT_EPS) -> np.ndarray:
    """Log-odds, after clamping probabilities into [eps, 1 - eps]."""
    mu = np.asarray(mu, dtype=float)
    clipped = np.clip(mu, eps, 1.0 - eps)
    diagnostics.record("logit_clamp", int(np.count_nonzero(clipped != mu)))
    return np.log(clipped) - np.log1p(-clipped)


def inverse_logit(nu) -> np.ndarray:
    """Logistic function ``exp(nu) / (1 + exp(nu))`` without overflow."""
    return expit(np.asarray(nu, dtype=float))


def compose(outer_values, inner_values, grid: Grid) -> np.ndarray:
    """``outer(inner(s))`` for curves sampled on ``grid`` (linear interpolation).

    Both arguments may be stacks of curves with matching leading shape.
    """
    outer = np.asarray(outer_values, dtype=float)
    inner = np.asarray(inner_values, dtype=float)
    if outer.ndim == 1 and inner.ndim == 1:
        return np.interp(inner, grid.points, outer)
    outer, inner = np.broadcast_arrays(np.atleast_2d(outer), np.atleast_2d(inner))
    return np.stack([np.interp(g, grid.points, f) for f, g in zip(outer, inner)])
