"""Univariate and weighted bivariate functional PCA.

Curves are sampled on a shared grid and every inner product is the
trapezoidal rule on that grid. Writing ``W`` for the diagonal matrix of
quadrature weights, the covariance operator's eigenproblem becomes the
symmetric matrix problem for ``W^1/2 C W^1/2``, solved here through an SVD
of the weighted, centered data.

The bivariate system pairs an amplitude curve (aligned log-odds) with a
phase curve (CLR of the warp) under the inner product
``<<(f, h), (g, k)>>_D = int f g + D int h k``. It is built component-wise:
a univariate FPCA per block, then an eigendecomposition of the D-weighted
covariance of the stacked block scores.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit

from binfda import diagnostics
from binfda.errors import PairingError, TruncationError
from binfda.fdcore import FunctionalSample, Grid
from binfda.transforms import EXP_BOUND, LOGIT_EPS, clr_inverse, compose

logger = logging.getLogger(__name__)

DEFAULT_D_GRID = tuple(np.round(np.arange(1, 51) * 0.1, 10))
_ZERO_VARIANCE = 1e-10
# |int psi| below this fraction of int |psi| counts as a sign tie
_SIGN_TIE = 1e-10
# MISE values this close (relative) to the minimum count as ties
_MISE_TIE = 1e-9
# keep reconstructed log-odds inside the logit clamp so probabilities stay in (0, 1)
_NU_BOUND = float(np.log((1 - LOGIT_EPS) / LOGIT_EPS))


def _orient(grid: Grid, primary: np.ndarray, secondary: Optional[np.ndarray] = None) -> float:
    """Sign (+1/-1) making ``int primary >= 0``; ties fall to the first nonzero coordinate."""
    total = float(grid.integrate(primary))
    scale = float(grid.integrate(np.abs(primary)))
    if abs(total) > _SIGN_TIE * max(scale, 1e-300):
        return 1.0 if total > 0 else -1.0
    joint = primary if secondary is None else np.concatenate([primary, secondary])
    nz = np.flatnonzero(np.abs(joint) > 1e-12 * max(np.max(np.abs(joint)), 1e-300))
    return 1.0 if nz.size == 0 or joint[nz[0]] > 0 else -1.0


def _pve(eigenvalues: np.ndarray) -> tuple[np.ndarray, bool]:
    total = eigenvalues.sum()
    if total <= _ZERO_VARIANCE * max(1, len(eigenvalues)):
        return np.full(len(eigenvalues), np.nan), False
    return eigenvalues / total, True


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class UnivariateEigenSystem:
    """Truncated Karhunen-Loeve expansion of one sample.

    Attributes
    ----------
    eigenfunctions : ndarray, shape (K, N)
        Orthonormal under the trapezoidal inner product.
    scores : ndarray, shape (n, K)
        ``int (f_i - mean) psi_k``.
    pve : ndarray
        ``lambda_k / sum(lambda)`` over the K computed components; NaN when the
        sample has no variance (``pve_defined`` is then False).
    """

    grid: Grid
    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    scores: np.ndarray
    pve: np.ndarray
    pve_defined: bool = True

    @property
    def n_components(self) -> int:
        return len(self.eigenvalues)

    def reconstruct(self, n_components: Optional[int] = None) -> np.ndarray:
        k = self.n_components if n_components is None else n_components
        return self.mean + self.scores[:, :k] @ self.eigenfunctions[:k]

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid.n_points,
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "pve": [None if np.isnan(p) else p for p in self.pve.tolist()],
            "eigenfunctions": self.eigenfunctions.tolist(),
            "scores": self.scores.tolist(),
        }


def fpca_univariate(sample: FunctionalSample, K: int) -> UnivariateEigenSystem:
    """Leading ``K`` eigenpairs of the sample covariance (divisor ``n - 1``).

    Raises
    ------
    TruncationError
        If ``K`` exceeds ``min(n - 1, N)`` or is below 1.
    """
    X = np.asarray(sample.values, dtype=float)
    n, N = X.shape
    if n < 2:
        raise TruncationError("FPCA needs at least 2 curves")
    if not 1 <= K <= min(n - 1, N):
        raise TruncationError(f"K={K} outside [1, min(n-1, N)] = [1, {min(n - 1, N)}]")
    grid = sample.grid
    sw = np.sqrt(grid.weights)
    mean = X.mean(axis=0)
    M = (X - mean) * sw / np.sqrt(n - 1)
    U, S, Vt = linalg.svd(M, full_matrices=False)
    U, S, Vt = U[:, :K], S[:K], Vt[:K]
    psi = Vt / sw
    scores = np.sqrt(n - 1) * U * S
    for k in range(K):
        if _orient(grid, psi[k]) < 0:
            psi[k] *= -1
            scores[:, k] *= -1
    lam = S ** 2
    pve, defined = _pve(lam)
    return UnivariateEigenSystem(grid, _frozen(mean), _frozen(lam), _frozen(psi),
                                 _frozen(scores), _frozen(pve), defined)


@dataclass(frozen=True, eq=False)
class BivariateEigenSystem:
    """Joint amplitude/phase expansion under the D-weighted inner product.

    ``amplitude_functions[k]`` and ``phase_functions[k]`` form the k-th pair
    ``(psi_k, phi_k)`` with ``int psi_k psi_j + D int phi_k phi_j = delta_kj``.
    """

    grid: Grid
    D: float
    mean_amplitude: np.ndarray
    mean_phase: np.ndarray
    eigenvalues: np.ndarray
    amplitude_functions: np.ndarray
    phase_functions: np.ndarray
    scores: np.ndarray
    pve: np.ndarray
    pve_defined: bool = True

    @property
    def n_components(self) -> int:
        return len(self.eigenvalues)

    def reconstruct(self, n_components: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
        """Truncated reconstruction ``(amplitude, phase)`` of every subject."""
        k = self.n_components if n_components is None else n_components
        xi = self.scores[:, :k]
        return (self.mean_amplitude + xi @ self.amplitude_functions[:k],
                self.mean_phase + xi @ self.phase_functions[:k])

    def inner(self, a, b) -> np.ndarray:
        """Gram matrix of pairs ``a = (psi, phi)`` and ``b`` under ``<<.,.>>_D``."""
        g = self.grid.weights
        return (a[0] * g) @ b[0].T + self.D * (a[1] * g) @ b[1].T

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid.n_points,
            "D": self.D,
            "mean_amplitude": self.mean_amplitude.tolist(),
            "mean_phase": self.mean_phase.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "pve": [None if np.isnan(p) else p for p in self.pve.tolist()],
            "amplitude_functions": self.amplitude_functions.tolist(),
            "phase_functions": self.phase_functions.tolist(),
            "scores": self.scores.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _check_pair(amplitude: FunctionalSample, phase: FunctionalSample) -> None:
    if amplitude.grid != phase.grid:
        raise PairingError("amplitude and phase samples live on different grids")
    if amplitude.n_curves != phase.n_curves:
        raise PairingError(f"{amplitude.n_curves} amplitude curves vs {phase.n_curves} phase curves")
    if amplitude.labels != phase.labels:
        raise PairingError("amplitude and phase rows are not paired (labels differ)")


def _block_components(system: UnivariateEigenSystem, block_pve: float) -> int:
    if block_pve >= 1.0 or not system.pve_defined:
        return system.n_components
    return int(np.searchsorted(np.cumsum(system.pve), block_pve) + 1)


class _ComponentWise:
    """Univariate block decompositions, reused across candidate weights."""

    def __init__(self, amplitude: FunctionalSample, phase: FunctionalSample, block_pve: float):
        _check_pair(amplitude, phase)
        if not 0 < block_pve <= 1:
            raise ValueError("block_pve must lie in (0, 1]")
        self.grid = amplitude.grid
        n, N = amplitude.values.shape
        full = min(n - 1, N)
        self.amp = fpca_univariate(amplitude, full)
        self.pha = fpca_univariate(phase, full)
        self.k1 = _block_components(self.amp, block_pve)
        self.k2 = _block_components(self.pha, block_pve)
        self.xi = np.hstack([self.amp.scores[:, :self.k1], self.pha.scores[:, :self.k2]])
        self.Z = self.xi.T @ self.xi / (n - 1)

    @property
    def max_components(self) -> int:
        return min(self.xi.shape[0] - 1, self.k1 + self.k2)

    def system(self, D: float, K: int) -> BivariateEigenSystem:
        if not D > 0:
            raise ValueError("D must be positive")
        if not 1 <= K <= self.max_components:
            raise TruncationError(f"K={K} outside [1, {self.max_components}]")
        dw = np.sqrt(np.concatenate([np.ones(self.k1), np.full(self.k2, D)]))
        lam, C = linalg.eigh(dw[:, None] * self.Z * dw[None, :])
        order = np.argsort(lam)[::-1][:K]
        lam, C = lam[order], C[:, order]
        neg = lam < 0
        if neg.any():
            diagnostics.record("bivariate_negative_eigenvalue", int(neg.sum()))
            lam = np.where(neg, 0.0, lam)
        psi = C[:self.k1].T @ self.amp.eigenfunctions[:self.k1]
        phi = C[self.k1:].T @ self.pha.eigenfunctions[:self.k2] / np.sqrt(D)
        scores = (self.xi * dw) @ C
        for k in range(K):
            if _orient(self.grid, psi[k], phi[k]) < 0:
                psi[k] *= -1
                phi[k] *= -1
                scores[:, k] *= -1
        pve, defined = _pve(lam)
        return BivariateEigenSystem(self.grid, float(D), self.amp.mean, self.pha.mean,
                                    _frozen(lam), _frozen(psi), _frozen(phi),
                                    _frozen(scores), _frozen(pve), defined)


def fpca_bivariate(amplitude: FunctionalSample, phase: FunctionalSample, D: float, K: int,
                   block_pve: float = 1.0) -> BivariateEigenSystem:
    """Leading ``K`` pairs of the D-weighted joint eigenproblem.

    Parameters
    ----------
    amplitude, phase : FunctionalSample
        Paired rows on one grid.
    D : float
        Weight of the phase block in the joint inner product.
    K : int
        Number of joint components, at most ``n - 1``.
    block_pve : float
        Fraction of each block's variance kept by its univariate expansion
        before the joint step; 1.0 keeps every component and makes the result
        agree with the direct eigendecomposition on the doubled grid.
    """
    return _ComponentWise(amplitude, phase, block_pve).system(D, K)


@dataclass(frozen=True)
class WeightSelection:
    D: float
    candidates: tuple
    mise: tuple
    excluded: tuple = ()

    def to_rows(self) -> list:
        return [(d, m) for d, m in zip(self.candidates, self.mise)]


def _reconstruction_mise(cw: _ComponentWise, D: float, K: int, target: np.ndarray) -> float:
    system = cw.system(D, K)
    nu, eta = system.reconstruct()
    if not (np.all(np.isfinite(eta)) and np.max(np.abs(eta)) < EXP_BOUND):
        return np.nan
    gamma = clr_inverse(eta, cw.grid)
    mu = expit(np.clip(compose(nu, gamma, cw.grid), -_NU_BOUND, _NU_BOUND))
    return float(np.mean(cw.grid.integrate((mu - target) ** 2)))


def select_weight(aligned_logit: FunctionalSample, warp_clr: FunctionalSample,
                  unaligned_prob: FunctionalSample, K: int,
                  grid_of_D: Sequence[float] = DEFAULT_D_GRID, block_pve: float = 1.0,
                  max_workers: Optional[int] = None) -> WeightSelection:
    """Choose D by the MISE of truncated joint reconstructions.

    Each subject is rebuilt from ``K`` joint components, the phase part is
    mapped back to a warp and composed with the amplitude part, and the
    result is compared with ``unaligned_prob``. Ties go to the smallest D.
    Candidates whose reconstruction overflows are excluded and logged.
    """
    candidates = tuple(float(d) for d in grid_of_D)
    if not candidates or min(candidates) <= 0:
        raise ValueError("candidate weights must be a nonempty set of positive numbers")
    if unaligned_prob.grid != aligned_logit.grid or unaligned_prob.n_curves != aligned_logit.n_curves:
        raise PairingError("target curves are not paired with the amplitude sample")
    cw = _ComponentWise(aligned_logit, warp_clr, block_pve)
    target = np.asarray(unaligned_prob.values)

    def run(d):
        return _reconstruction_mise(cw, d, K, target)

    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            mise = list(pool.map(run, candidates))
    else:
        mise = [run(d) for d in candidates]
    mise = np.array(mise)
    bad = ~np.isfinite(mise)
    if bad.all():
        raise FloatingPointError("every candidate weight overflowed")
    if bad.any():
        diagnostics.record("weight_candidate_overflow", int(bad.sum()))
        logger.warning("excluded weights after overflow: %s", np.array(candidates)[bad].tolist())
    best = np.nanmin(mise)
    ties = np.flatnonzero(~bad & (mise <= best + _MISE_TIE * abs(best) + 1e-15))
    chosen = min(candidates[i] for i in ties)
    return WeightSelection(chosen, candidates, tuple(mise.tolist()),
                           tuple(np.array(candidates)[bad].tolist()))


@dataclass(frozen=True, eq=False)
class ModesOfVariation:
    """Probability curves one component away from the mean, in each direction.

    The ``*_warp`` fields hold the warps used by the phase and joint modes.
    """

    k: int
    pve_k: float
    overall_mean_prob: np.ndarray
    amplitude_minus: np.ndarray
    amplitude_plus: np.ndarray
    phase_minus: np.ndarray
    phase_plus: np.ndarray
    joint_minus: np.ndarray
    joint_plus: np.ndarray
    mean_warp: np.ndarray
    warp_minus: np.ndarray
    warp_plus: np.ndarray

    def to_dict(self) -> dict:
        out = {"k": self.k, "pve_k": None if np.isnan(self.pve_k) else self.pve_k}
        for name in ("overall_mean_prob", "amplitude_minus", "amplitude_plus", "phase_minus",
                     "phase_plus", "joint_minus", "joint_plus", "mean_warp", "warp_minus",
                     "warp_plus"):
            out[name] = getattr(self, name).tolist()
        return out


def modes_of_variation(system: BivariateEigenSystem, k: int,
                       mean_warp_clr: Optional[np.ndarray] = None) -> ModesOfVariation:
    """Amplitude, phase and joint modes of the ``k``-th (1-based) component.

    The perturbation half-width is ``2 sqrt(lambda_k)``; ``mean_warp_clr``
    defaults to the system's phase mean.
    """
    if not 1 <= k <= system.n_components:
        raise ValueError(f"k must lie in [1, {system.n_components}]")
    grid = system.grid
    lam = float(system.eigenvalues[k - 1])
    if lam < 0:
        diagnostics.record("mode_negative_eigenvalue")
        logger.warning("eigenvalue %d is negative (%.3g); clamped to 0", k, lam)
        lam = 0.0
    h = 2.0 * np.sqrt(lam)
    nu = np.asarray(system.mean_amplitude)
    eta = np.asarray(system.mean_phase if mean_warp_clr is None else mean_warp_clr, dtype=float)
    psi, phi = system.amplitude_functions[k - 1], system.phase_functions[k - 1]

    def prob(outer, inner):
        return expit(np.clip(compose(outer, inner, grid), -_NU_BOUND, _NU_BOUND))

    g_bar = clr_inverse(eta, grid)
    g_minus = clr_inverse(eta - h * phi, grid)
    g_plus = clr_inverse(eta + h * phi, grid)
    return ModesOfVariation(
        k=k,
        pve_k=float(system.pve[k - 1]),
        overall_mean_prob=prob(nu, g_bar),
        amplitude_minus=prob(nu - h * psi, g_bar),
        amplitude_plus=prob(nu + h * psi, g_bar),
        phase_minus=prob(nu, g_minus),
        phase_plus=prob(nu, g_plus),
        joint_minus=prob(nu - h * psi, g_minus),
        joint_plus=prob(nu + h * psi, g_plus),
        mean_warp=g_bar,
        warp_minus=g_minus,
        warp_plus=g_plus,
    )
