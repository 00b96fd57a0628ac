"""End-to-end analysis of a trial file, one stage (delay) at a time.

For each stage: register the binary curves, choose the FPCA weight D by
MISE, fit the bivariate eigen-system at that weight, build the modes of
variation of the first two components, and run both permutation tests on
the unaligned, aligned and warp curve sets. Every result is written as a
delimited table or a JSON document; ``manifest.json`` lists them with
checksums, the configuration and the input digest.

Outputs carry no timestamps, so a rerun with the same configuration
rewrites the same bytes. Files are written to a temporary name and then
renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy

import binfda
from binfda import diagnostics
from binfda.errors import ConfigError, EmptySample
from binfda.fdcore import DELAYS, TrialSeries, read_trials
from binfda.fpca import DEFAULT_D_GRID, fpca_bivariate, modes_of_variation, select_weight
from binfda.inference import CURVE_SETS, PermutationPlan, run_test_battery
from binfda.registration import RegistrationConfig, RegistrationResult, register

logger = logging.getLogger(__name__)

MODE_SERIES = ("overall_mean_prob", "amplitude_minus", "amplitude_plus", "phase_minus",
               "phase_plus", "joint_minus", "joint_plus", "mean_warp", "warp_minus", "warp_plus")
N_MODES = 2


@dataclass(frozen=True)
class PipelineConfig:
    input: Optional[str] = None
    out: str = "binfda_out"
    stages: tuple = DELAYS
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    components: int = 10
    d_grid: tuple = DEFAULT_D_GRID
    permutations: int = 1000
    alpha: float = 0.05
    seed: int = 0
    plots: bool = True
    workers: int = 1

    def __post_init__(self):
        bad = [d for d in self.stages if d not in DELAYS]
        if bad or not self.stages:
            raise ConfigError(f"stages must be a nonempty subset of {DELAYS}, got {self.stages}")
        if self.components < 1:
            raise ConfigError("components must be at least 1")
        if not self.d_grid or min(self.d_grid) <= 0:
            raise ConfigError("d_grid must hold positive weights")
        if self.permutations < 1:
            raise ConfigError("permutations must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        object.__setattr__(self, "stages", tuple(sorted(set(int(d) for d in self.stages))))
        object.__setattr__(self, "d_grid", tuple(float(d) for d in self.d_grid))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = list(self.stages)
        out["d_grid"] = list(self.d_grid)
        return out


def stage_seed(seed: int, delay: int) -> int:
    """Per-stage permutation seed, independent of which other stages run."""
    return int(np.random.SeedSequence([int(seed), int(delay)]).generate_state(1, np.uint64)[0])


# -- atomic output -----------------------------------------------------------

def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def read_table(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def write_json(path, doc) -> None:
    atomic_write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- stage steps ---------------------------------------------------------------

def stage_dir(out, delay: int) -> Path:
    return Path(out) / f"stage_{delay:02d}"


def write_registration(reg: RegistrationResult, folder: Path) -> list:
    """Registration document plus one curve table per sample."""
    folder.mkdir(parents=True, exist_ok=True)
    atomic_write(folder / "registration.json", reg.to_json())
    files = ["registration.json"]
    grid = reg.grid.points
    header = ["subject_id", "group"] + [repr(float(s)) for s in grid]
    for name, sample in (("unaligned_logit", reg.unaligned_logit),
                         ("aligned_logit", reg.aligned_logit),
                         ("unaligned_prob", reg.unaligned_prob),
                         ("warps", reg.warp_values),
                         ("warp_clr", reg.warp_clr)):
        write_table(folder / f"{name}.csv", header,
                    ([sid, lab, *row] for sid, lab, row in
                     zip(reg.subject_ids, reg.labels, sample.values)))
        files.append(f"{name}.csv")
    return files


def load_registration(folder: Path) -> RegistrationResult:
    path = Path(folder) / "registration.json"
    if not path.exists():
        raise FileNotFoundError(f"missing artifact {path}")
    return RegistrationResult.from_json(path.read_text())


def run_fpca_stage(reg: RegistrationResult, config: PipelineConfig, folder: Path) -> tuple[list, dict]:
    """Weight selection, eigen-system at the chosen weight, first modes."""
    n = len(reg.subject_ids)
    K = min(config.components, n - 1)
    sel = select_weight(reg.aligned_logit, reg.warp_clr, reg.unaligned_prob, K, config.d_grid)
    write_table(folder / "weight_selection.csv", ["D", "mise", "selected"],
                ((d, m, d == sel.D) for d, m in zip(sel.candidates, sel.mise)))
    system = fpca_bivariate(reg.aligned_logit, reg.warp_clr, sel.D, K)
    atomic_write(folder / "eigensystem.json", system.to_json())
    write_table(folder / "eigenvalues.csv", ["k", "eigenvalue", "pve"],
                ((k + 1, lam, p) for k, (lam, p) in enumerate(zip(system.eigenvalues, system.pve))))
    modes = [modes_of_variation(system, k) for k in range(1, min(N_MODES, K) + 1)]
    header = ["s"] + [f"k{m.k}_{name}" for m in modes for name in MODE_SERIES]
    cols = [getattr(m, name) for m in modes for name in MODE_SERIES]
    write_table(folder / "modes.csv", header,
                ([s, *vals] for s, vals in zip(reg.grid.points, zip(*cols))))
    summary = {"D_hat": sel.D, "components": K, "excluded_D": list(sel.excluded),
               "pve": [None if np.isnan(p) else float(p) for p in system.pve[:N_MODES]]}
    return ["weight_selection.csv", "eigensystem.json", "eigenvalues.csv", "modes.csv"], summary


def run_test_stage(reg: RegistrationResult, config: PipelineConfig, folder: Path) -> tuple[list, dict]:
    mask = np.array([lab == "L" for lab in reg.labels])
    plan = PermutationPlan(int(mask.sum()), int((~mask).sum()), config.permutations,
                           stage_seed(config.seed, reg.delay))
    battery = run_test_battery(reg, plan, config.alpha)
    write_table(folder / "global_tests.csv", ["curve_set", "T_observed", "p_value", "B"],
                ((k, battery.global_tests[k].T_observed, battery.global_tests[k].p_value, plan.B)
                 for k in CURVE_SETS))
    write_table(folder / "permutation_statistics.csv", ["b", *CURVE_SETS],
                ((b + 1, *(battery.global_tests[k].T_permuted[b] for k in CURVE_SETS))
                 for b in range(plan.B)))
    header = ["s"]
    cols = []
    for k in CURVE_SETS:
        pf = battery.pvalue_functions[k]
        header += [f"{k}_unadjusted", f"{k}_adjusted", f"{k}_significant"]
        cols += [pf.unadjusted, pf.adjusted, pf.significant_mask]
    write_table(folder / "pvalue_functions.csv", header,
                ([s, *vals] for s, vals in zip(reg.grid.points, zip(*cols))))
    report = battery.to_dict()
    report.update(alpha=config.alpha, delay=reg.delay)
    write_json(folder / "test_report.json", report)
    summary = {"B": plan.B, "permutation_seed": plan.seed,
               "p_values": {k: battery.global_tests[k].p_value for k in CURVE_SETS}}
    return ["global_tests.csv", "permutation_statistics.csv", "pvalue_functions.csv",
            "test_report.json"], summary


def _results_index(summary_fpca: dict, summary_tests: dict) -> list:
    """Logical results of one stage: registration, D-hat, 2 test families x 3 curve sets."""
    out = [{"result": "registration", "file": "registration.json"},
           {"result": "weight", "file": "weight_selection.csv", "D_hat": summary_fpca["D_hat"]}]
    for k in CURVE_SETS:
        out.append({"result": "global_test", "curve_set": k, "file": "global_tests.csv",
                    "p_value": summary_tests["p_values"][k]})
    for k in CURVE_SETS:
        out.append({"result": "interval_wise_test", "curve_set": k,
                    "file": "pvalue_functions.csv"})
    return out


def run_stage(series: Sequence[TrialSeries], delay: int, config: PipelineConfig) -> dict:
    """Full analysis of one stage; raises on failure."""
    data = [s for s in series if s.delay == delay]
    if not data:
        raise EmptySample(f"no trial series at delay {delay}")
    folder = stage_dir(config.out, delay)
    before = diagnostics.snapshot()
    reg = register(data, config.registration)
    files = write_registration(reg, folder)
    fpca_files, fpca_summary = run_fpca_stage(reg, config, folder)
    test_files, test_summary = run_test_stage(reg, config, folder)
    files += fpca_files + test_files
    after = diagnostics.snapshot()
    events = {k: after[k] - before.get(k, 0) for k in sorted(after) if after[k] != before.get(k, 0)}
    return {
        "status": "ok",
        "subjects": len(data),
        "grid_size": reg.grid.n_points,
        "registration_converged": reg.converged,
        "degenerate_subjects": [s for s, d in zip(reg.subject_ids, reg.degenerate) if d],
        "fpca": fpca_summary,
        "tests": test_summary,
        "results": _results_index(fpca_summary, test_summary),
        "files": {name: sha256_file(folder / name) for name in files},
        # counts are exact only when stages run one at a time
        "numerical_events": events if config.workers == 1 else {},
    }


def versions() -> dict:
    return {"binfda": binfda.__version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run_pipeline(config: PipelineConfig, series: Optional[Sequence[TrialSeries]] = None) -> int:
    """Run every configured stage; returns 0 if all succeed, 1 otherwise.

    ``series`` overrides reading ``config.input`` (the manifest then records
    no input digest).
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = None
    if series is None:
        if not config.input:
            raise ConfigError("no input trial file given")
        if not Path(config.input).is_file():
            raise ConfigError(f"input file {config.input} does not exist")
        series = read_trials(config.input)
        digest = sha256_file(config.input)

    def guarded(delay):
        try:
            logger.info("stage %d: start", delay)
            result = run_stage(series, delay, config)
            logger.info("stage %d: done", delay)
            return result
        except Exception as exc:  # stage isolation
            logger.error("stage %d failed: %s: %s", delay, type(exc).__name__, exc)
            return {"status": "failed", "error": type(exc).__name__, "message": str(exc)}

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(guarded, config.stages))
    else:
        results = [guarded(d) for d in config.stages]
    stages = {str(d): r for d, r in zip(config.stages, results)}
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "input_sha256": digest,
        "versions": versions(),
        "stages": stages,
    }
    write_json(out / "manifest.json", manifest)
    if config.plots and any(r["status"] == "ok" for r in results):
        from binfda.plots import render_plots
        render_plots(out)
    failed = [d for d, r in stages.items() if r["status"] != "ok"]
    return 1 if failed else 0


def with_overrides(config: PipelineConfig, **kw) -> PipelineConfig:
    reg_keys = {"K_a", "K_p", "seed"}
    reg_kw = {k: kw[k] for k in reg_keys & kw.keys() if kw[k] is not None}
    top = {k: v for k, v in kw.items() if k not in {"K_a", "K_p"} and v is not None}
    reg = replace(config.registration, **reg_kw) if reg_kw else config.registration
    return replace(config, registration=reg, **top)
