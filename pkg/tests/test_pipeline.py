import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from binfda.cli import main, parse_d_grid, parse_stages, read_config_file
from binfda.errors import ConfigError
from binfda.fdcore import read_trials, write_trials
from binfda.fpca import DEFAULT_D_GRID
from binfda.pipeline import PipelineConfig, atomic_write, run_pipeline, stage_dir
from binfda.plots import plot_histograms, plot_modes, plot_pvalues, render_plots
from binfda.synthgen import simulate_study

SMALL = dict(permutations=60, d_grid=(0.5, 1.0, 2.0), components=4, plots=False)


@pytest.fixture(scope="module")
def study():
    series, _ = simulate_study(seed=3, trial_scale=0.08)
    return series


@pytest.fixture(scope="module")
def finished_run(study, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig(out=str(out), seed=3, **{**SMALL, "plots": True})
    status = run_pipeline(cfg, study)
    return out, status


def _tables(folder: Path) -> dict:
    return {p.relative_to(folder).as_posix(): p.read_bytes()
            for p in sorted(folder.rglob("*")) if p.suffix in (".csv", ".json")}


def test_manifest_artifact_contract(finished_run):
    out, status = finished_run
    assert status == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert sorted(manifest["stages"], key=int) == ["0", "2", "4", "8", "16"]
    for info in manifest["stages"].values():
        assert info["status"] == "ok"
        kinds = [r["result"] for r in info["results"]]
        assert len(kinds) == 8
        assert kinds.count("registration") == 1 and kinds.count("weight") == 1
        assert kinds.count("global_test") == 3 and kinds.count("interval_wise_test") == 3
        for name, digest in info["files"].items():
            assert len(digest) == 64
    assert manifest["seed"] == 3 and manifest["versions"]["numpy"] == np.__version__
    assert not list(out.rglob("*.tmp"))


def test_rerun_is_byte_identical(study, finished_run, tmp_path):
    out, _ = finished_run
    cfg = PipelineConfig(out=str(tmp_path), seed=3, **{**SMALL, "plots": True})
    assert run_pipeline(cfg, study) == 0
    first, second = _tables(out), _tables(tmp_path)
    # the manifest echoes the output directory; everything else must match exactly
    m1, m2 = json.loads(first.pop("manifest.json")), json.loads(second.pop("manifest.json"))
    m1["config"].pop("out"), m2["config"].pop("out")
    assert m1 == m2
    assert first == second
    svg = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.svg"))
    assert len(svg) == 20
    for name in svg:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes()


def test_single_subject_stage_fails_in_isolation(study, tmp_path):
    keep_one = [s for s in study if s.delay != 4] + [s for s in study if s.delay == 4][:1]
    cfg = PipelineConfig(out=str(tmp_path), stages=(2, 4, 8), **SMALL)
    assert run_pipeline(cfg, keep_one) == 1
    stages = json.loads((tmp_path / "manifest.json").read_text())["stages"]
    assert stages["4"] == {"status": "failed", "error": "GroupError",
                           "message": stages["4"]["message"]}
    assert stages["2"]["status"] == stages["8"]["status"] == "ok"


def test_missing_stage_fails(study, tmp_path):
    only_zero = [s for s in study if s.delay == 2]
    cfg = PipelineConfig(out=str(tmp_path), stages=(2, 4), **SMALL)
    assert run_pipeline(cfg, only_zero) == 1
    stages = json.loads((tmp_path / "manifest.json").read_text())["stages"]
    assert stages["4"]["error"] == "EmptySample"


def test_concurrent_stages_match_sequential(study, finished_run, tmp_path):
    out, _ = finished_run
    cfg = PipelineConfig(out=str(tmp_path), seed=3, workers=3, **SMALL)
    assert run_pipeline(cfg, study) == 0
    a, b = _tables(out), _tables(tmp_path)
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b


# -- plots -----------------------------------------------------------------------

def test_pvalue_plot_has_six_series(finished_run):
    out, _ = finished_run
    for delay in (0, 16):
        fig = plot_pvalues(stage_dir(out, delay))
        lines = [ln for ln in fig.axes[0].get_lines() if not ln.get_label().startswith("_")]
        assert len(lines) == 6
        assert sum(ln.get_linestyle() == "-" for ln in lines) == 3
        (alpha_line,) = [ln for ln in fig.axes[0].get_lines() if ln.get_label() == "_alpha"]
        assert set(alpha_line.get_ydata()) == {0.05}


def test_modes_plot_pve_annotations(finished_run):
    out, _ = finished_run
    fig = plot_modes(stage_dir(out, 0))
    titles = [ax.get_title() for ax in fig.axes]
    shown = {t.split("component ")[1].split(" ")[0]: float(t.split("PVE ")[1].rstrip("%)"))
             for t in titles}
    assert len(shown) == 2 and sum(shown.values()) <= 100.0 + 1e-9
    assert len(fig.axes) == 6


def test_histogram_marks_observed_statistic(finished_run):
    out, _ = finished_run
    folder = stage_dir(out, 2)
    fig = plot_histograms(folder)
    rows = [r.split(",") for r in (folder / "global_tests.csv").read_text().splitlines()[1:]]
    table = {r[0]: float(r[1]) for r in rows}
    for ax, name in zip(fig.axes, ("unaligned", "aligned", "warps")):
        (vline,) = [ln for ln in ax.get_lines() if ln.get_label() == "_observed"]
        assert f"{vline.get_xdata()[0]:.6g}" == f"{table[name]:.6g}"


def test_render_plots_names_missing_file(finished_run, tmp_path):
    out, _ = finished_run
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    (stage_dir(copy, 8) / "modes.csv").unlink()
    with pytest.raises(FileNotFoundError, match="modes.csv"):
        render_plots(copy)


# -- helpers and CLI ---------------------------------------------------------------

def test_atomic_write_replaces(tmp_path):
    target = tmp_path / "a.txt"
    atomic_write(target, "one")
    atomic_write(target, "two")
    assert target.read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]


def test_parsers():
    assert parse_stages("0, 4,16") == (0, 4, 16)
    assert parse_d_grid("0.1:0.1:5.0") == DEFAULT_D_GRID
    assert parse_d_grid("0.5,2") == (0.5, 2.0)
    with pytest.raises(ConfigError):
        parse_d_grid("1:0:2")
    with pytest.raises(ConfigError):
        parse_stages("a,b")


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(stages=(3,))
    with pytest.raises(ConfigError):
        PipelineConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        PipelineConfig(d_grid=(0.0, 1.0))


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed = 9\nd-grid = 0.5,1\nstages = 2,4\nplots = no\n")
    assert read_config_file(path) == {"seed": 9, "d_grid": "0.5,1", "stages": "2,4",
                                      "plots": "no"}
    path.write_text("bogus = 1\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_cli_exit_codes(study, tmp_path, capsys):
    trials = tmp_path / "trials.csv"
    write_trials([s for s in study if s.delay in (2, 4)], trials)
    assert main(["pipeline", "--input", str(tmp_path / "absent.csv"), "--out", str(tmp_path)]) == 2
    assert main(["pipeline", "--input", str(trials), "--stages", "2,3"]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("permutations = many\n")
    assert main(["pipeline", "--config", str(cfg), "--input", str(trials)]) == 2
    out = tmp_path / "out"
    args = ["--input", str(trials), "--out", str(out), "--stages", "2,4", "--permutations", "40",
            "--d-grid", "0.5,1", "--components", "3", "--no-plots", "--seed", "5"]
    assert main(["pipeline", *args]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["permutations"] == 40 and manifest["config"]["plots"] is False
    assert manifest["config"]["registration"]["seed"] == 5
    assert len(manifest["input_sha256"]) == 64
    # stage 8 is absent from the file
    partial = ["--input", str(trials), "--out", str(tmp_path / "p"), "--stages", "2,8",
               "--permutations", "40", "--d-grid", "0.5,1", "--components", "3", "--no-plots"]
    assert main(["pipeline", *partial]) == 1


def test_cli_config_file_and_override(study, tmp_path):
    trials = tmp_path / "trials.csv"
    write_trials([s for s in study if s.delay == 2], trials)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"input = {trials}\nout = {tmp_path / 'o'}\nstages = 2\npermutations = 30\n"
                   "d_grid = 1\ncomponents = 2\nplots = false\nseed = 1\n")
    assert main(["pipeline", "--config", str(cfg), "--permutations", "20"]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["permutations"] == 20 and manifest["config"]["seed"] == 1


def test_cli_subcommands_chain(tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--out", str(sim), "--seed", "2", "--trial-scale", "0.05",
                 "--stages", "2"]) == 0
    assert {s.delay for s in read_trials(sim / "trials.csv")} == {2}
    assert (sim / "truth.json").exists()
    reg = tmp_path / "reg"
    assert main(["register", "--input", str(sim / "trials.csv"), "--out", str(reg),
                 "--stages", "2"]) == 0
    assert (stage_dir(reg, 2) / "registration.json").exists()
    assert main(["fpca", "--input", str(reg), "--out", str(tmp_path / "f"), "--stages", "2",
                 "--d-grid", "0.5,1", "--components", "2"]) == 0
    assert (stage_dir(tmp_path / "f", 2) / "eigensystem.json").exists()
    assert main(["test", "--input", str(reg), "--out", str(tmp_path / "t"), "--stages", "2",
                 "--permutations", "30"]) == 0
    assert (stage_dir(tmp_path / "t", 2) / "pvalue_functions.csv").exists()
    # registration for stage 4 was never produced
    assert main(["test", "--input", str(reg), "--out", str(tmp_path / "t"), "--stages", "4"]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "binfda", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "register", "fpca", "test", "pipeline", "plot"):
        assert cmd in res.stdout
