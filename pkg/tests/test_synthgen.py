import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from binfda.synthgen import (
    STUDY_STAGES,
    Bump,
    Constant,
    IdentityWarps,
    LogisticTimeWarps,
    PowerWarps,
    ScenarioSpec,
    Sigmoid,
    generate,
    acquisition_cohort,
    simulate_study,
    spec_to_dict,
    write_truth,
)


def test_constant_half_mean_in_band():
    hits = 0
    for seed in range(100):
        series, _ = generate(ScenarioSpec(n_L=1, n_C=1, trials_per_subject=10000,
                                          template=Constant(0.5), seed=seed))
        hits += 0.49 <= series[0].outcomes.mean() <= 0.51
    assert hits >= 95


def test_identity_warps_are_identity():
    _, truth = generate(ScenarioSpec(n_L=2, n_C=2, trials_per_subject=50, seed=0))
    np.testing.assert_array_equal(truth.warps, np.tile(truth.grid.points, (4, 1)))
    np.testing.assert_array_equal(truth.prob, truth.aligned_prob)


@pytest.mark.parametrize("family", [PowerWarps(), LogisticTimeWarps()])
def test_warp_families_are_monotone_bijections(family):
    rng = np.random.default_rng(0)
    s = np.linspace(0, 1, 301)
    for _ in range(20):
        g = family(family.sample(rng), s)
        assert g[0] == pytest.approx(0, abs=1e-12) and g[-1] == pytest.approx(1, abs=1e-12)
        assert np.all(np.diff(g) > 0)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 60))
@settings(max_examples=30, deadline=None)
def test_outcomes_binary_and_times_normalized(seed, n):
    series, truth = generate(ScenarioSpec(n_L=2, n_C=1, trials_per_subject=n,
                                          warps=PowerWarps(), seed=seed))
    for s in series:
        assert set(np.unique(s.outcomes)) <= {0, 1}
        assert s.times[0] == 0.0 and s.times[-1] == 1.0
    assert np.all((truth.prob > 0) & (truth.prob < 1))


def test_generate_is_deterministic_and_seed_sensitive():
    spec = acquisition_cohort(seed=7, trials=300)
    a, ta = generate(spec)
    b, tb = generate(spec)
    assert all(np.array_equal(x.outcomes, y.outcomes) for x, y in zip(a, b))
    np.testing.assert_array_equal(ta.warp_params, tb.warp_params)
    c, _ = generate(acquisition_cohort(seed=8, trials=300))
    assert any(not np.array_equal(x.outcomes, y.outcomes) for x, y in zip(a, c))


def test_labels_and_ids():
    series, truth = generate(ScenarioSpec(n_L=3, n_C=2, trials_per_subject=20))
    assert [s.group for s in series] == ["L", "L", "L", "C", "C"]
    assert [s.subject_id for s in series] == ["L00", "L01", "L02", "C00", "C01"]
    assert truth.labels == tuple(s.group for s in series)


@pytest.mark.parametrize("trials", [200, 2000, 20000])
def test_binomial_frequency_converges(trials):
    # pooled success count is Binomial(sum p_j); two-sided 1e-4 z-band
    template = Bump(0.5, 0.15, 0.3, 0.4)
    series, _ = generate(ScenarioSpec(n_L=2, n_C=2, trials_per_subject=trials,
                                      template=template, seed=trials))
    y = np.concatenate([s.outcomes for s in series])
    p = np.concatenate([template(s.times) for s in series])
    z = (y.sum() - p.sum()) / np.sqrt(np.sum(p * (1 - p)))
    assert abs(z) < stats.norm.isf(0.5e-4)


def test_shifts_move_group_l_only():
    base = ScenarioSpec(n_L=3, n_C=3, trials_per_subject=50, warps=PowerWarps(), seed=1)
    shifted = ScenarioSpec(n_L=3, n_C=3, trials_per_subject=50, warps=PowerWarps(), seed=1,
                           amplitude_shift=0.5, phase_shift=0.3)
    _, t0 = generate(base)
    _, t1 = generate(shifted)
    np.testing.assert_array_equal(t0.warp_params[3:], t1.warp_params[3:])
    np.testing.assert_allclose(t1.warp_params[:3], t0.warp_params[:3] * np.exp(0.3))
    assert np.all(t1.aligned_prob[:3] > t0.aligned_prob[:3])


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(n_L=0)
    with pytest.raises(ValueError):
        ScenarioSpec(trials_per_subject=1)
    with pytest.raises(ValueError):
        ScenarioSpec(template=Constant(1.0))


def test_sigmoid_template_shape():
    f = Sigmoid()
    assert f(0.0) == pytest.approx(0.5 + 0.4 * (1 / (1 + np.exp(4.5))))
    assert f(1.0) == pytest.approx(0.9, abs=1e-4)


def test_simulate_study_stages(tmp_path):
    series, truths = simulate_study(seed=0, trial_scale=0.1)
    assert sorted(truths) == sorted(STUDY_STAGES)
    assert {s.delay for s in series} == set(STUDY_STAGES)
    for delay, (n, _) in STUDY_STAGES.items():
        lens = [len(s) for s in series if s.delay == delay]
        base = max(8, round(n * 0.1))
        assert len(lens) == 33 and min(lens) >= base and max(lens) <= base + 5
    write_truth(truths, tmp_path / "truth.json")
    doc = json.loads((tmp_path / "truth.json").read_text())
    assert sorted(doc, key=int) == [str(d) for d in sorted(STUDY_STAGES)]
    assert len(doc["0"]["warps"]) == 33


def test_spec_to_dict_is_json():
    d = spec_to_dict(acquisition_cohort())
    assert d["template"]["kind"] == "Sigmoid" and d["warps"]["kind"] == "PowerWarps"
    json.dumps(d)
    assert IdentityWarps().sample(np.random.default_rng(0)) == 0.0


def test_amplitude_profile_localizes_shift():
    kw = dict(n_L=2, n_C=2, trials_per_subject=50, template=Sigmoid(), seed=4)
    profile = Bump(0.8, 0.05, 1.0, 0.0)
    _, t0 = generate(ScenarioSpec(**kw))
    _, t1 = generate(ScenarioSpec(amplitude_shift=1.0, amplitude_profile=profile, **kw))
    s = t0.grid.points
    logit = lambda p: np.log(p / (1 - p))  # noqa: E731
    np.testing.assert_allclose(logit(t1.aligned_prob[:2]) - logit(t0.aligned_prob[:2]),
                               np.broadcast_to(profile(s), (2, s.size)), atol=1e-9)
    np.testing.assert_array_equal(t1.aligned_prob[2:], t0.aligned_prob[2:])
    assert spec_to_dict(ScenarioSpec(amplitude_profile=profile, **kw))["amplitude_profile"]["kind"] == "Bump"
