"""Containers for binary trial data and sampled curves.

Also hosts the three small preprocessing operations every stage needs:
time normalization, the common grid size of a stage, and piecewise-linear
interpolation onto a uniform grid.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from binfda.errors import DomainMismatch, EmptySample, InvalidSeries

GROUPS = ("L", "C")
DELAYS = (0, 2, 4, 8, 16)
TRIAL_HEADER = ("subject_id", "group", "delay", "trial_index", "outcome")

_SPAN_TOL = 1e-12


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Grid:
    """Uniform grid of ``n_points`` values on [0, 1], endpoints included."""

    n_points: int

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError(f"grid needs at least 2 points, got {self.n_points}")
        object.__setattr__(self, "n_points", int(self.n_points))

    @cached_property
    def points(self) -> np.ndarray:
        return _frozen(np.linspace(0.0, 1.0, self.n_points))

    @property
    def spacing(self) -> float:
        return 1.0 / (self.n_points - 1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights; ``weights @ f`` integrates f over [0, 1]."""
        w = np.full(self.n_points, self.spacing)
        w[0] = w[-1] = 0.5 * self.spacing
        return _frozen(w)

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Trapezoidal integral over [0, 1] along the last axis."""
        return np.asarray(values, dtype=float) @ self.weights

    def __len__(self):
        return self.n_points


@dataclass(frozen=True, eq=False)
class TrialSeries:
    """One subject's ordered binary outcomes at one delay.

    ``times`` are normalized so that the first trial sits at 0 and the last
    at 1.
    """

    subject_id: str
    group: str
    delay: int
    times: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        if self.group not in GROUPS:
            raise InvalidSeries(f"group must be one of {GROUPS}, got {self.group!r}")
        if int(self.delay) not in DELAYS:
            raise InvalidSeries(f"delay must be one of {DELAYS}, got {self.delay!r}")
        times = np.asarray(self.times, dtype=float)
        outcomes = np.asarray(self.outcomes)
        if times.ndim != 1 or times.size < 2:
            raise InvalidSeries("a trial series needs at least 2 trials")
        if outcomes.shape != times.shape:
            raise InvalidSeries("times and outcomes differ in length")
        if not np.all(np.diff(times) > 0):
            raise InvalidSeries("times must be strictly increasing")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise InvalidSeries("times must start at 0 and end at 1")
        if not np.all((outcomes == 0) | (outcomes == 1)):
            raise InvalidSeries("outcomes must be 0 or 1")
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "delay", int(self.delay))
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "outcomes", _frozen(outcomes, dtype=np.int8))

    def __len__(self):
        return self.times.size

    @classmethod
    def from_outcomes(cls, subject_id, group, delay, outcomes, raw_times=None):
        """Build a series from outcomes, spacing trials uniformly unless
        ``raw_times`` is given."""
        outcomes = np.asarray(outcomes)
        if raw_times is None:
            raw_times = np.arange(outcomes.size, dtype=float)
        return cls(subject_id, group, delay, normalize_times(raw_times), outcomes)


class SampleKind(str, enum.Enum):
    UNALIGNED_LOGIT = "UnalignedLogit"
    ALIGNED_LOGIT = "AlignedLogit"
    WARP_CLR = "WarpCLR"
    WARP = "Warp"
    PROBABILITY = "Probability"


@dataclass(frozen=True, eq=False)
class FunctionalSample:
    """``n`` curves evaluated on one shared grid, with a group tag per curve."""

    grid: Grid
    values: np.ndarray
    labels: tuple = field(default=())
    kind: SampleKind = SampleKind.UNALIGNED_LOGIT

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        kind = SampleKind(self.kind)
        if values.shape[1] != self.grid.n_points:
            raise DomainMismatch(
                f"curves have {values.shape[1]} points, grid has {self.grid.n_points}"
            )
        labels = tuple(self.labels) if len(self.labels) else ("",) * values.shape[0]
        if len(labels) != values.shape[0]:
            raise ValueError("one label per curve is required")
        if not np.all(np.isfinite(values)):
            raise ValueError("curves must be finite")
        if kind is SampleKind.PROBABILITY and not np.all((values > 0) & (values < 1)):
            raise ValueError("probability curves must lie in (0, 1)")
        if kind is SampleKind.WARP_CLR:
            worst = np.max(np.abs(self.grid.integrate(values)))
            if worst > 1e-8:
                raise ValueError(f"CLR curves must integrate to 0 (worst {worst:.2e})")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "kind", kind)

    @property
    def n_curves(self) -> int:
        return self.values.shape[0]

    def group_mask(self, group: str) -> np.ndarray:
        return np.array([lab == group for lab in self.labels])

    def subset(self, rows) -> "FunctionalSample":
        rows = np.asarray(rows)
        labels = tuple(np.asarray(self.labels, dtype=object)[rows])
        return FunctionalSample(self.grid, self.values[rows], labels, self.kind)


def normalize_times(raw_times: Sequence[float]) -> np.ndarray:
    """Affinely map strictly increasing times onto [0, 1].

    >>> normalize_times([10, 20, 30])
    array([0. , 0.5, 1. ])
    """
    t = np.asarray(raw_times, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise InvalidSeries("need at least 2 observation times")
    if not np.all(np.isfinite(t)) or not np.all(np.diff(t) > 0):
        raise InvalidSeries("observation times must be finite and strictly increasing")
    out = (t - t[0]) / (t[-1] - t[0])
    out[-1] = 1.0
    return out


def common_grid_size(sample: Iterable[TrialSeries], delay: int) -> int:
    """Smallest trial count among the subjects observed at ``delay``."""
    sizes = [len(s) for s in sample if s.delay == delay]
    if not sizes:
        raise EmptySample(f"no trial series at delay {delay}")
    return min(sizes)


def interpolate_to_grid(abscissae, values, target: Grid) -> np.ndarray:
    """Piecewise-linear interpolation of one curve onto ``target``."""
    x = np.asarray(abscissae, dtype=float)
    y = np.asarray(values, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("abscissae and values must be matching 1-d arrays")
    if x[0] > _SPAN_TOL or x[-1] < 1.0 - _SPAN_TOL:
        raise DomainMismatch(f"source spans [{x[0]}, {x[-1]}], not [0, 1]")
    if np.any(np.diff(x) <= 0):
        raise ValueError("abscissae must be strictly increasing")
    return np.interp(target.points, x, y)


def read_trials(path, spacing: str = "index") -> list[TrialSeries]:
    """Load a trial file into one :class:`TrialSeries` per subject and delay.

    ``spacing="index"`` places trials uniformly by trial index. With
    ``spacing="time"`` an extra ``time`` column supplies the raw observation
    times, so gaps between sessions are kept.
    """
    if spacing not in ("index", "time"):
        raise ValueError(f"unknown spacing {spacing!r}")
    rows: dict = {}
    meta: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(TRIAL_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise InvalidSeries(f"trial file lacks columns {sorted(missing)}")
        if spacing == "time" and "time" not in reader.fieldnames:
            raise InvalidSeries("spacing='time' needs a 'time' column")
        for lineno, rec in enumerate(reader, start=2):
            try:
                key = (rec["subject_id"], int(rec["delay"]))
                group = rec["group"].strip()
                trial = int(rec["trial_index"])
                outcome = int(rec["outcome"])
                when = float(rec["time"]) if spacing == "time" else float(trial)
            except (TypeError, ValueError) as exc:
                raise InvalidSeries(f"{path}:{lineno}: {exc}") from None
            if meta.setdefault(key, group) != group:
                raise InvalidSeries(f"{path}:{lineno}: subject changes group")
            rows.setdefault(key, []).append((trial, when, outcome))
    series = []
    for (subject, delay), recs in sorted(rows.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        recs.sort()
        idx = [r[0] for r in recs]
        if len(set(idx)) != len(idx):
            raise InvalidSeries(f"duplicate trial_index for subject {subject} delay {delay}")
        raw = np.array([r[1] for r in recs])
        series.append(
            TrialSeries(subject, meta[(subject, delay)], delay, normalize_times(raw),
                        np.array([r[2] for r in recs]))
        )
    return series


def write_trials(series: Iterable[TrialSeries], path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRIAL_HEADER)
        for s in series:
            for j, y in enumerate(s.outcomes):
                writer.writerow((s.subject_id, s.group, s.delay, j, int(y)))
