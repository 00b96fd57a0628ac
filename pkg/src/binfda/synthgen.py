"""Synthetic binary learning-curve cohorts with known amplitude and phase.

Each subject ``i`` gets a latent probability curve on internal time, a warp
``gamma_i``, and outcomes ``Y_ij ~ Bernoulli(mu_i(gamma_i(s_j)))`` at
uniformly spaced trials. The ground truth is returned next to the trials so
that tests can score registration, FPCA and inference against it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.special import expit, logit as _logit

from binfda.fdcore import Grid, TrialSeries, normalize_times


@dataclass(frozen=True)
class Sigmoid:
    """Logistic rise from ``floor`` to ``ceiling`` centred at ``center``."""

    rate: float = 15.0
    center: float = 0.3
    floor: float = 0.5
    ceiling: float = 0.9

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.floor + (self.ceiling - self.floor) * expit(self.rate * (t - self.center))


@dataclass(frozen=True)
class Constant:
    p: float = 0.5

    def __call__(self, t):
        return np.full(np.shape(t), float(self.p))


@dataclass(frozen=True)
class Bump:
    """Gaussian bump of probability on top of ``base``."""

    center: float = 0.5
    width: float = 0.1
    height: float = 0.3
    base: float = 0.5

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.base + self.height * np.exp(-0.5 * ((t - self.center) / self.width) ** 2)


Template = Union[Sigmoid, Constant, Bump]


@dataclass(frozen=True)
class IdentityWarps:
    def sample(self, rng, shift: float = 0.0) -> float:
        return 0.0

    def __call__(self, param, s):
        return np.asarray(s, dtype=float)


@dataclass(frozen=True)
class PowerWarps:
    """``gamma(s) = s**a`` with ``a`` log-uniform on [low, high].

    A group phase shift multiplies the exponent by ``exp(shift)``.
    """

    low: float = 0.6
    high: float = 1.7

    def sample(self, rng, shift: float = 0.0) -> float:
        return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high)) + shift))

    def __call__(self, a, s):
        return np.asarray(s, dtype=float) ** a


@dataclass(frozen=True)
class LogisticTimeWarps:
    """Normalized logistic reparameterization with random centre.

    A group phase shift moves the centre.
    """

    rate: float = 6.0
    center_low: float = 0.35
    center_high: float = 0.65

    def sample(self, rng, shift: float = 0.0) -> float:
        return float(rng.uniform(self.center_low, self.center_high) + shift)

    def __call__(self, c, s):
        s = np.asarray(s, dtype=float)
        lo, hi = expit(-self.rate * c), expit(self.rate * (1 - c))
        return np.clip((expit(self.rate * (s - c)) - lo) / (hi - lo), 0.0, 1.0)


WarpFamily = Union[IdentityWarps, PowerWarps, LogisticTimeWarps]


@dataclass(frozen=True)
class ScenarioSpec:
    """Design of one synthetic stage.

    ``amplitude_shift`` is added on the logit scale to every group-L curve,
    multiplied by ``amplitude_profile(t)`` on internal time when a profile is
    given (so the difference can be confined to part of the domain);
    ``phase_shift`` is passed to the warp family for group-L subjects.
    ``amplitude_sd`` adds a per-subject logit offset in both groups.
    """

    n_L: int = 17
    n_C: int = 16
    trials_per_subject: int = 2022
    extra_trials: int = 0
    delay: int = 0
    template: Template = field(default_factory=Sigmoid)
    warps: WarpFamily = field(default_factory=IdentityWarps)
    amplitude_shift: float = 0.0
    phase_shift: float = 0.0
    amplitude_sd: float = 0.0
    amplitude_profile: Optional[Bump] = None
    seed: int = 0
    truth_grid_size: int = 201

    def __post_init__(self):
        if self.n_L < 1 or self.n_C < 1:
            raise ValueError("each group needs at least one subject")
        if self.trials_per_subject < 2 or self.extra_trials < 0:
            raise ValueError("need at least 2 trials per subject")
        probe = self.template(np.linspace(0, 1, 101))
        if not np.all((probe > 0) & (probe < 1)):
            raise ValueError("template probabilities must stay inside (0, 1)")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Latent curves on a reference grid, rows ordered like the trial series."""

    grid: Grid
    subject_ids: tuple
    labels: tuple
    warp_params: np.ndarray
    warps: np.ndarray
    aligned_prob: np.ndarray
    prob: np.ndarray

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid.n_points,
            "subject_ids": list(self.subject_ids),
            "labels": list(self.labels),
            "warp_params": self.warp_params.tolist(),
            "warps": self.warps.tolist(),
            "aligned_prob": self.aligned_prob.tolist(),
            "prob": self.prob.tolist(),
        }


def _subject_rng(seed: int, delay: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(delay), int(index)])


def generate(spec: ScenarioSpec) -> tuple[list[TrialSeries], GroundTruth]:
    """Draw one cohort; identical specs give identical cohorts."""
    grid = Grid(spec.truth_grid_size)
    groups = ["L"] * spec.n_L + ["C"] * spec.n_C
    series, ids, params, warps, aligned, prob = [], [], [], [], [], []
    for i, group in enumerate(groups):
        rng = _subject_rng(spec.seed, spec.delay, i)
        shift_p = spec.phase_shift if group == "L" else 0.0
        shift_a = spec.amplitude_shift if group == "L" else 0.0
        a = spec.warps.sample(rng, shift_p)
        offset = rng.normal(0.0, spec.amplitude_sd) if spec.amplitude_sd > 0 else 0.0
        n_trials = spec.trials_per_subject + (
            int(rng.integers(0, spec.extra_trials + 1)) if spec.extra_trials else 0
        )

        def latent(t, offset=offset, shift_a=shift_a):
            t = np.asarray(t, dtype=float)
            effect = shift_a * (spec.amplitude_profile(t) if spec.amplitude_profile else 1.0)
            return expit(_logit(spec.template(t)) + offset + effect)

        times = normalize_times(np.arange(n_trials, dtype=float))
        p = latent(spec.warps(a, times))
        outcomes = (rng.uniform(size=n_trials) < p).astype(np.int8)
        sid = f"{group}{i if group == 'L' else i - spec.n_L:02d}"
        series.append(TrialSeries(sid, group, spec.delay, times, outcomes))
        ids.append(sid)
        params.append(a)
        gamma = spec.warps(a, grid.points)
        warps.append(gamma)
        aligned.append(latent(grid.points))
        prob.append(latent(gamma))
    truth = GroundTruth(grid, tuple(ids), tuple(groups), np.array(params), np.array(warps),
                        np.array(aligned), np.array(prob))
    return series, truth


def acquisition_cohort(seed: int = 0, trials: int = 2022, **overrides) -> ScenarioSpec:
    """Acquisition-like cohort: 17 lesion and 16 control subjects, success
    rising from chance to 0.9 and plateauing around mid-stage."""
    kw = dict(n_L=17, n_C=16, trials_per_subject=trials, template=Sigmoid(),
              warps=PowerWarps(0.7, 1.4), amplitude_sd=0.2, seed=seed)
    kw.update(overrides)
    return ScenarioSpec(**kw)


# Trial counts and ceilings per stage; ceilings fall as the delay grows.
STUDY_STAGES = {
    0: (2022, Sigmoid(15.0, 0.3, 0.5, 0.9)),
    2: (175, Sigmoid(8.0, 0.4, 0.5, 0.8)),
    4: (170, Sigmoid(8.0, 0.45, 0.5, 0.76)),
    8: (170, Sigmoid(8.0, 0.5, 0.5, 0.72)),
    16: (164, Sigmoid(8.0, 0.5, 0.5, 0.68)),
}


def simulate_study(seed: int = 0, trial_scale: float = 1.0, stages=None,
                   **overrides) -> tuple[list[TrialSeries], dict]:
    """All five stages of a synthetic study; returns trials and per-delay truth."""
    all_series, truths = [], {}
    for delay, (n_trials, template) in STUDY_STAGES.items():
        if stages is not None and delay not in stages:
            continue
        kw = dict(trials_per_subject=max(8, int(round(n_trials * trial_scale))), extra_trials=5,
                  delay=delay, template=template)
        kw.update(overrides)
        series, truth = generate(acquisition_cohort(seed, **kw))
        all_series.extend(series)
        truths[delay] = truth
    return all_series, truths


def write_truth(truths, path) -> None:
    """Ground-truth sidecar: JSON keyed by delay."""
    if isinstance(truths, GroundTruth):
        truths = {0: truths}
    doc = {str(d): t.to_dict() for d, t in sorted(truths.items())}
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def spec_to_dict(spec: ScenarioSpec) -> dict:
    out = asdict(spec)
    out["template"] = {"kind": type(spec.template).__name__, **asdict(spec.template)}
    out["warps"] = {"kind": type(spec.warps).__name__, **asdict(spec.warps)}
    if spec.amplitude_profile is not None:
        out["amplitude_profile"] = {"kind": "Bump", **asdict(spec.amplitude_profile)}
    return out
