import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binfda.errors import GroupError, Underdetermined
from binfda.fdcore import FunctionalSample, Grid
from binfda.inference import (
    PermutationPlan,
    global_permutation_test,
    interval_p_value,
    interval_wise_test,
    run_test_battery,
)
from binfda.registration import RegistrationConfig, register
from binfda.synthgen import PowerWarps, ScenarioSpec, generate


def _two_groups(X_L, X_C, grid=None):
    X = np.vstack([X_L, X_C])
    labels = ("L",) * len(X_L) + ("C",) * len(X_C)
    return FunctionalSample(grid or Grid(X.shape[1]), X, labels)


def _stat(X, in_L, grid):
    d = X[in_L].mean(axis=0) - X[~in_L].mean(axis=0)
    return np.trapezoid(d * d, grid.points)


def _smooth_noise(rng, n, grid, sd=1.0):
    s = grid.points
    return sd * (rng.normal(size=(n, 1)) + rng.normal(size=(n, 1)) * np.sin(2 * np.pi * s)
                 + 0.3 * rng.normal(size=(n, grid.n_points)))


# -- plans -------------------------------------------------------------------

def test_plan_rows_are_valid_and_seeded():
    a = PermutationPlan(17, 16, B=200, seed=5)
    b = PermutationPlan(17, 16, B=200, seed=5)
    c = PermutationPlan(17, 16, B=200, seed=6)
    assert a.labels.shape == (200, 33)
    assert np.all(a.labels.sum(axis=1) == 17)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, c.labels)
    with pytest.raises(ValueError):
        a.labels[0, 0] = False


def test_exhaustive_plan_enumerates_partitions():
    plan = PermutationPlan.exhaustive(2, 2)
    assert plan.B == 6
    assert len({tuple(r) for r in plan.labels}) == 6


def test_plan_validation():
    with pytest.raises(GroupError):
        PermutationPlan(0, 3)
    with pytest.raises(ValueError):
        PermutationPlan(2, 2, labels=np.array([[True, True, True, False]]))


# -- global test ---------------------------------------------------------------

def test_statistic_matches_trapezoid(rng):
    grid = Grid(37)
    sample = _two_groups(rng.normal(size=(5, 37)), rng.normal(size=(4, 37)), grid)
    res = global_permutation_test(sample, PermutationPlan(5, 4, B=50, seed=1))
    in_L = sample.group_mask("L")
    assert res.T_observed == pytest.approx(_stat(sample.values, in_L, grid), rel=1e-12)
    plan = PermutationPlan(5, 4, B=50, seed=1)
    expect = [_stat(sample.values, row, grid) for row in plan.labels]
    np.testing.assert_allclose(res.T_permuted, expect, rtol=1e-12)


def test_constant_equal_groups_p_is_one():
    X = np.full((7, 20), 0.3)
    sample = _two_groups(X[:3], X[3:])
    res = global_permutation_test(sample, PermutationPlan(3, 4, B=100, seed=0))
    assert res.T_observed == 0 and np.all(res.T_permuted == 0) and res.p_value == 1.0
    pf = interval_wise_test(sample, PermutationPlan(3, 4, B=100, seed=0))
    np.testing.assert_array_equal(pf.adjusted, 1.0)
    assert not pf.significant_mask.any()


@pytest.mark.parametrize("seed", range(20))
def test_exhaustive_enumeration_oracle(seed):
    rng = np.random.default_rng(seed)
    grid = Grid(15)
    X = rng.normal(size=(4, 15))
    sample = _two_groups(X[:2], X[2:], grid)
    res = global_permutation_test(sample, PermutationPlan.exhaustive(2, 2))
    T = _stat(X, np.array([True, True, False, False]), grid)
    stats = []
    for chosen in itertools.combinations(range(4), 2):
        in_L = np.isin(np.arange(4), chosen)
        stats.append(_stat(X, in_L, grid))
    # complementary partitions give identical statistics; compare with a relative slack
    expect = sum(t >= T * (1 - 1e-9) for t in stats) / 6
    assert res.p_value == expect
    assert res.p_value * 6 == round(res.p_value * 6)


def test_p_value_times_b_is_integer(rng):
    sample = _two_groups(rng.normal(size=(6, 10)), rng.normal(size=(5, 10)))
    res = global_permutation_test(sample, PermutationPlan(6, 5, B=137, seed=2))
    assert res.p_value * 137 == int(round(res.p_value * 137))
    assert 0 <= res.p_value <= 1


def test_power_two_sd_shift():
    grid = Grid(50)
    hits = 0
    plan = PermutationPlan(16, 17, B=1000, seed=0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        base = _smooth_noise(rng, 33, grid)
        pooled_sd = np.sqrt(grid.integrate(base.var(axis=0, ddof=1)))
        base[:16] += 2 * pooled_sd
        res = global_permutation_test(_two_groups(base[:16], base[16:], grid), plan)
        hits += res.p_value <= 0.01
    assert hits >= 95


def test_label_symmetry(rng):
    grid = Grid(25)
    X = _smooth_noise(rng, 9, grid)
    plan = PermutationPlan(4, 5, B=60, seed=3)
    base = global_permutation_test(_two_groups(X[:4], X[4:], grid), plan)
    # relabel the same curves with the assignment of row b
    b = 17
    in_L = plan.labels[b]
    relabeled = FunctionalSample(grid, X, tuple("L" if m else "C" for m in in_L))
    other = global_permutation_test(relabeled, plan)
    np.testing.assert_array_equal(other.T_permuted, base.T_permuted)
    assert other.T_observed == base.T_permuted[b]


def test_group_errors(rng):
    X = rng.normal(size=(4, 10))
    with pytest.raises(GroupError):
        global_permutation_test(FunctionalSample(Grid(10), X, ("L",) * 4), PermutationPlan(2, 2))
    with pytest.raises(GroupError):
        global_permutation_test(_two_groups(X[:1], X[1:]), PermutationPlan(2, 2))


# -- interval-wise ---------------------------------------------------------------

def test_full_interval_equals_global(rng):
    grid = Grid(30)
    sample = _two_groups(_smooth_noise(rng, 8, grid) + 0.3, _smooth_noise(rng, 9, grid), grid)
    plan = PermutationPlan(8, 9, B=300, seed=4)
    assert interval_p_value(sample, plan, 0, 29) == global_permutation_test(sample, plan).p_value


def test_iwt_matches_direct_interval_loop(rng):
    grid = Grid(9)
    sample = _two_groups(rng.normal(size=(5, 9)) + 0.4, rng.normal(size=(5, 9)), grid)
    plan = PermutationPlan(5, 5, B=80, seed=9)
    pf = interval_wise_test(sample, plan)
    in_L = sample.group_mask("L")
    w = grid.weights

    def p_interval(i, j):
        def t(mask):
            d = sample.values[mask].mean(axis=0) - sample.values[~mask].mean(axis=0)
            return np.sum((d * d * w)[i:j + 1])
        T = t(in_L)
        return np.mean([t(row) >= T * (1 - 1e-9) for row in plan.labels])

    table = {(i, j): p_interval(i, j) for i in range(9) for j in range(i, 9)}
    for s in range(9):
        assert pf.unadjusted[s] == table[(s, s)]
        assert pf.adjusted[s] == max(p for (i, j), p in table.items() if i <= s <= j)


@given(seed=st.integers(0, 10**6))
@settings(max_examples=10, deadline=None)
def test_adjusted_dominates_intervals(seed):
    rng = np.random.default_rng(seed)
    grid = Grid(20)
    sample = _two_groups(_smooth_noise(rng, 6, grid) + 0.5 * np.sin(np.pi * grid.points),
                         _smooth_noise(rng, 6, grid), grid)
    plan = PermutationPlan(6, 6, B=100, seed=seed)
    pf = interval_wise_test(sample, plan, alpha=0.1)
    assert np.all(pf.adjusted >= pf.unadjusted)
    np.testing.assert_array_equal(pf.significant_mask, pf.adjusted <= 0.1)
    for _ in range(10):
        i, j = sorted(rng.integers(0, 20, size=2))
        s = rng.integers(i, j + 1)
        assert pf.adjusted[s] >= interval_p_value(sample, plan, i, j)


def test_iwt_preconditions(rng):
    sample = _two_groups(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
    with pytest.raises(Underdetermined):
        interval_wise_test(sample, PermutationPlan(3, 3, B=10))


def test_iwt_deterministic(rng):
    grid = Grid(40)
    sample = _two_groups(_smooth_noise(rng, 7, grid), _smooth_noise(rng, 7, grid), grid)
    a = interval_wise_test(sample, PermutationPlan(7, 7, B=200, seed=1))
    b = interval_wise_test(sample, PermutationPlan(7, 7, B=200, seed=1))
    assert a.adjusted.tobytes() == b.adjusted.tobytes()
    assert a.unadjusted.tobytes() == b.unadjusted.tobytes()


# -- battery --------------------------------------------------------------------

def test_battery_runs_all_sets_with_one_table():
    series, _ = generate(ScenarioSpec(n_L=4, n_C=4, trials_per_subject=120,
                                      warps=PowerWarps(), seed=3))
    reg = register(series, RegistrationConfig())
    plan = PermutationPlan(4, 4, B=70, seed=2)
    bat = run_test_battery(reg, plan)
    assert set(bat.global_tests) == set(bat.pvalue_functions) == {"unaligned", "aligned", "warps"}
    assert bat.global_tests["warps"].T_observed == pytest.approx(
        global_permutation_test(reg.warp_clr, plan).T_observed, rel=0)
    doc = json.loads(bat.to_json())
    assert doc["B"] == 70 and len(doc["interval_wise"]["aligned"]["adjusted"]) == reg.grid.n_points
