"""Clamped B-spline bases, least-squares fitting and monotone warps.

Evaluation is delegated to :class:`scipy.interpolate.BSpline`; the knot
layout (open knot vector, equally spaced interior knots) is fixed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from binfda.errors import InvalidWarp, Underdetermined
from binfda.fdcore import Grid

DEFAULT_DEGREE = 3


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis on [0, 1].

    Parameters
    ----------
    degree : int
        Polynomial degree (3 for cubic).
    interior_knots : tuple of float
        Knots strictly inside (0, 1), nondecreasing.
    """

    degree: int
    interior_knots: tuple = ()

    def __post_init__(self):
        knots = tuple(float(k) for k in self.interior_knots)
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if any(k <= 0.0 or k >= 1.0 for k in knots):
            raise ValueError("interior knots must lie in (0, 1)")
        if any(b < a for a, b in zip(knots, knots[1:])):
            raise ValueError("interior knots must be nondecreasing")
        object.__setattr__(self, "interior_knots", knots)

    @classmethod
    def uniform(cls, num_basis: int, degree: int = DEFAULT_DEGREE) -> "SplineBasis":
        """Basis of ``num_basis`` functions with equally spaced interior knots."""
        n_interior = num_basis - degree - 1
        if n_interior < 0:
            raise ValueError(f"degree {degree} needs at least {degree + 1} basis functions")
        knots = tuple(np.linspace(0.0, 1.0, n_interior + 2)[1:-1])
        return cls(degree, knots)

    @property
    def num_basis(self) -> int:
        return self.degree + 1 + len(self.interior_knots)

    @cached_property
    def knots(self) -> np.ndarray:
        p = self.degree
        return np.concatenate([np.zeros(p + 1), self.interior_knots, np.ones(p + 1)])

    @cached_property
    def greville(self) -> np.ndarray:
        """Greville abscissae; as coefficients they reproduce the identity map."""
        p, t = self.degree, self.knots
        if p == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[j + 1:j + p + 1].mean() for j in range(self.num_basis)])

    def spline(self, coefficients) -> BSpline:
        return BSpline(self.knots, np.asarray(coefficients, dtype=float), self.degree)

    def design(self, x, deriv: int = 0) -> np.ndarray:
        """Basis (or derivative) values at arbitrary points in [0, 1], shape (len(x), K)."""
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        if deriv > self.degree:
            return np.zeros((x.size, self.num_basis))
        spl = self.spline(np.eye(self.num_basis))
        if deriv:
            spl = spl.derivative(deriv)
        out = spl(x)
        if deriv == 0 and self.degree == 0:
            # scipy leaves the right endpoint of a degree-0 basis empty
            out[x >= 1.0, -1] = 1.0
        return out


@lru_cache(maxsize=64)
def _cached_design(basis: SplineBasis, grid: Grid, deriv: int) -> np.ndarray:
    mat = basis.design(grid.points, deriv)
    mat.setflags(write=False)
    return mat


def eval_basis(basis: SplineBasis, grid: Grid, deriv: int = 0) -> np.ndarray:
    """N x K matrix of basis values on the grid (cached per basis and grid)."""
    return _cached_design(basis, grid, deriv)


def fit_least_squares(values, basis: SplineBasis, grid: Grid, ridge: float = 0.0) -> np.ndarray:
    """Coefficients minimizing ``||B c - y||^2 + ridge * ||c||^2``.

    ``values`` may be one curve (length N) or a stack of curves (n x N); the
    result then has matching leading shape.
    """
    y = np.asarray(values, dtype=float)
    if y.shape[-1] != grid.n_points:
        raise ValueError("values do not match the grid")
    if grid.n_points < basis.num_basis:
        raise Underdetermined(
            f"{grid.n_points} grid points cannot determine {basis.num_basis} coefficients"
        )
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    B = eval_basis(basis, grid)
    if ridge == 0.0:
        coef, *_ = linalg.lstsq(B, y.T)
        return coef.T
    gram = B.T @ B + ridge * np.eye(basis.num_basis)
    return linalg.solve(gram, B.T @ y.T, assume_a="pos").T


@dataclass(frozen=True, eq=False)
class Warp:
    """Monotone spline map of [0, 1] onto itself.

    The coefficients must be nondecreasing with first 0 and last 1; with a
    clamped knot vector this gives ``gamma(0) = 0`` and ``gamma(1) = 1``.
    """

    basis: SplineBasis
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        if c.shape != (self.basis.num_basis,):
            raise InvalidWarp(f"expected {self.basis.num_basis} coefficients, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidWarp("warp coefficients must be finite")
        if abs(c[0]) > 1e-12 or abs(c[-1] - 1.0) > 1e-12:
            raise InvalidWarp("warp coefficients must start at 0 and end at 1")
        if np.any(np.diff(c) < 0):
            raise InvalidWarp("warp coefficients must be nondecreasing")
        c[0], c[-1] = 0.0, 1.0
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def identity(cls, basis: SplineBasis) -> "Warp":
        return cls(basis, basis.greville)

    @classmethod
    def from_increments(cls, basis: SplineBasis, increments) -> "Warp":
        d = np.asarray(increments, dtype=float)
        c = np.concatenate([[0.0], np.cumsum(d / d.sum())])
        c[-1] = 1.0
        return cls(basis, c)

    def __call__(self, s) -> np.ndarray:
        return np.clip(self.basis.spline(self.coefficients)(np.clip(s, 0.0, 1.0)), 0.0, 1.0)

    def derivative(self, s) -> np.ndarray:
        return self.basis.spline(self.coefficients).derivative()(np.clip(s, 0.0, 1.0))


def eval_warp(warp: Warp, grid: Grid) -> np.ndarray:
    """Warp values on the grid; raises InvalidWarp unless strictly increasing."""
    g = eval_basis(warp.basis, grid) @ warp.coefficients
    g = np.clip(g, 0.0, 1.0)
    g[0], g[-1] = 0.0, 1.0
    if np.any(np.diff(g) <= 0):
        raise InvalidWarp("warp is not strictly increasing on the grid")
    return g


def invert_warp(values, grid: Grid) -> np.ndarray:
    """Numerical inverse of a strictly increasing warp sampled on ``grid``."""
    return np.interp(grid.points, np.asarray(values, dtype=float), grid.points)
