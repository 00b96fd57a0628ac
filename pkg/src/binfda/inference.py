"""Two-group permutation tests for functional samples.

The global test uses ``T = int (mean_L - mean_C)^2``; interval-wise testing
(IWT) repeats the test on every contiguous interval of basis coefficients
and turns the results into an adjusted p-value function that controls the
error rate on intervals.

All tests read one precomputed label table (:class:`PermutationPlan`), so
tests on different curve sets, or on different intervals, see exactly the
same relabelings. p-values are ``#{T_b >= T} / B`` with no +1 correction.

Curves for IWT are represented in a cubic B-spline basis with one
coefficient per grid node (knots on the grid). That spline interpolates the
data, so its value at node ``j`` is the curve value there, and the
contribution of coefficient ``j`` to the integrated squared mean difference
is ``w_j * (mean_L - mean_C)(s_j)^2`` with ``w`` the trapezoidal weights.
Interval statistics are differences of prefix sums of these contributions;
the full interval is the global statistic bit for bit.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb
from typing import Optional

import numpy as np

from binfda.errors import GroupError, Underdetermined
from binfda.fdcore import GROUPS, FunctionalSample, Grid

DEFAULT_PERMUTATIONS = 1000
# statistics within this fraction of the largest one count as ties (">=" includes them)
_TIE = 1e-11


@dataclass(frozen=True, eq=False)
class PermutationPlan:
    """Precomputed relabelings: ``labels[b, i]`` is True when curve ``i`` goes to L.

    The table is drawn from ``seed`` when the plan is built, before any
    statistic is computed; every row puts exactly ``n_L`` curves in L.
    """

    n_L: int
    n_C: int
    B: int = DEFAULT_PERMUTATIONS
    seed: int = 0
    labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_L < 1 or self.n_C < 1:
            raise GroupError("both groups need at least one curve")
        n = self.n_L + self.n_C
        if self.labels is None:
            if self.B < 1:
                raise ValueError("B must be positive")
            rng = np.random.default_rng(self.seed)
            table = np.zeros((self.B, n), dtype=bool)
            for row in table:
                row[rng.permutation(n)[:self.n_L]] = True
        else:
            table = np.array(self.labels, dtype=bool)
            if table.ndim != 2 or table.shape[1] != n:
                raise ValueError(f"label table must have {n} columns")
            if not np.all(table.sum(axis=1) == self.n_L):
                raise ValueError(f"every row must assign exactly {self.n_L} curves to L")
            object.__setattr__(self, "B", table.shape[0])
        table.setflags(write=False)
        object.__setattr__(self, "labels", table)

    @property
    def n(self) -> int:
        return self.n_L + self.n_C

    @classmethod
    def exhaustive(cls, n_L: int, n_C: int) -> "PermutationPlan":
        """Every one of the ``C(n, n_L)`` assignments, once (seed unused)."""
        n = n_L + n_C
        if comb(n, n_L) > 10**6:
            raise ValueError("too many partitions to enumerate")
        rows = []
        for chosen in itertools.combinations(range(n), n_L):
            row = np.zeros(n, dtype=bool)
            row[list(chosen)] = True
            rows.append(row)
        return cls(n_L, n_C, seed=0, labels=np.array(rows))

    @classmethod
    def for_sample(cls, sample: FunctionalSample, B: int = DEFAULT_PERMUTATIONS,
                   seed: int = 0) -> "PermutationPlan":
        mask = _group_mask(sample)
        return cls(int(mask.sum()), int((~mask).sum()), B, seed)


@dataclass(frozen=True, eq=False)
class GlobalTestResult:
    T_observed: float
    T_permuted: np.ndarray
    p_value: float

    @property
    def B(self) -> int:
        return len(self.T_permuted)

    def to_dict(self) -> dict:
        return {"T_observed": self.T_observed, "p_value": self.p_value, "B": self.B,
                "T_permuted": self.T_permuted.tolist()}


@dataclass(frozen=True, eq=False)
class PValueFunction:
    """Unadjusted and interval-adjusted p-values along the grid."""

    grid: Grid
    unadjusted: np.ndarray
    adjusted: np.ndarray
    alpha: float
    significant_mask: np.ndarray

    def to_dict(self) -> dict:
        return {"grid_size": self.grid.n_points, "alpha": self.alpha,
                "unadjusted": self.unadjusted.tolist(), "adjusted": self.adjusted.tolist(),
                "significant_mask": [bool(m) for m in self.significant_mask]}


def _group_mask(sample: FunctionalSample) -> np.ndarray:
    labels = set(sample.labels)
    if not labels <= set(GROUPS):
        raise GroupError(f"unknown group labels {sorted(labels - set(GROUPS))}")
    mask = sample.group_mask(GROUPS[0])
    if mask.all() or not mask.any():
        raise GroupError("both groups must be present in the sample")
    return mask


def _contributions(sample: FunctionalSample, plan: PermutationPlan) -> tuple[np.ndarray, np.ndarray]:
    """Per-node weighted squared mean differences, observed row first.

    Returns ``(prefix, obs_mask)`` where ``prefix`` has shape (B+1, N+1).
    """
    mask = _group_mask(sample)
    if plan.n_L != mask.sum() or plan.n_C != (~mask).sum():
        raise GroupError(f"plan is for {plan.n_L}+{plan.n_C} curves, sample has "
                         f"{mask.sum()}+{(~mask).sum()}")
    X = np.asarray(sample.values, dtype=float)
    assign = np.vstack([mask, plan.labels]).astype(float)
    diff = assign @ X / plan.n_L - (1.0 - assign) @ X / plan.n_C
    contrib = diff * diff * sample.grid.weights
    prefix = np.zeros((contrib.shape[0], contrib.shape[1] + 1))
    np.cumsum(contrib, axis=1, out=prefix[:, 1:])
    return prefix, mask


def _p_values(stats: np.ndarray, scale: float) -> np.ndarray:
    """Column-wise ``#{T_b >= T} / B`` for rows ``[T, T_1, ..., T_B]``."""
    tol = _TIE * scale
    return np.count_nonzero(stats[1:] >= stats[:1] - tol, axis=0) / (stats.shape[0] - 1)


def global_permutation_test(sample: FunctionalSample, plan: PermutationPlan) -> GlobalTestResult:
    """Permutation test of equal group means with ``T = int (mean_L - mean_C)^2``."""
    prefix, _ = _contributions(sample, plan)
    T = prefix[:, -1]
    p = float(_p_values(T[:, None], float(T.max()))[0])
    return GlobalTestResult(float(T[0]), T[1:].copy(), p)


def interval_wise_test(sample: FunctionalSample, plan: PermutationPlan, spline_degree: int = 3,
                       alpha: float = 0.05) -> PValueFunction:
    """Interval-wise permutation test over all contiguous coefficient intervals.

    ``unadjusted[j]`` is the test on coefficient ``j`` alone; ``adjusted[j]``
    is the largest p-value over all intervals containing ``j``.
    """
    N = sample.grid.n_points
    if N < 4:
        raise Underdetermined(f"interval-wise testing needs at least 4 grid points, got {N}")
    if N < spline_degree + 1:
        raise Underdetermined(f"degree-{spline_degree} splines need at least {spline_degree + 1} points")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    prefix, _ = _contributions(sample, plan)
    scale = float(prefix[:, -1].max())
    unadjusted = np.empty(N)
    adjusted = np.zeros(N)
    for i in range(N):
        # intervals [i, j] for j = i .. N-1
        stats = prefix[:, i + 1:] - prefix[:, i:i + 1]
        p = _p_values(stats, scale)
        unadjusted[i] = p[0]
        # p~(s) for s >= i: max over j >= s of p([i, j])
        suffix = np.maximum.accumulate(p[::-1])[::-1]
        np.maximum(adjusted[i:], suffix, out=adjusted[i:])
    return PValueFunction(sample.grid, unadjusted, adjusted, float(alpha), adjusted <= alpha)


def interval_p_value(sample: FunctionalSample, plan: PermutationPlan, start: int, stop: int) -> float:
    """p-value of the interval of coefficients ``start .. stop`` (inclusive)."""
    prefix, _ = _contributions(sample, plan)
    stats = prefix[:, stop + 1] - prefix[:, start]
    return float(_p_values(stats[:, None], float(prefix[:, -1].max()))[0])


CURVE_SETS = ("unaligned", "aligned", "warps")


@dataclass(frozen=True, eq=False)
class TestBattery:
    """Global and interval-wise results for the three curve sets of one stage."""

    __test__ = False  # not a pytest class

    plan: PermutationPlan
    global_tests: dict
    pvalue_functions: dict

    def to_dict(self) -> dict:
        return {
            "B": self.plan.B,
            "seed": self.plan.seed,
            "global": {k: v.to_dict() for k, v in self.global_tests.items()},
            "interval_wise": {k: v.to_dict() for k, v in self.pvalue_functions.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def curve_sets(registration) -> dict:
    """The three samples tested per stage: unaligned and aligned log-odds, CLR warps."""
    return {"unaligned": registration.unaligned_logit, "aligned": registration.aligned_logit,
            "warps": registration.warp_clr}


def run_test_battery(registration, plan: PermutationPlan, alpha: float = 0.05,
                     spline_degree: int = 3) -> TestBattery:
    """Both tests on all three curve sets, sharing one label table."""
    sets = curve_sets(registration)
    return TestBattery(
        plan,
        {k: global_permutation_test(s, plan) for k, s in sets.items()},
        {k: interval_wise_test(s, plan, spline_degree, alpha) for k, s in sets.items()},
    )
