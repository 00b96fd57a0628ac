"""Command-line entry point: ``binfda <subcommand> [options]``.

Subcommands ``simulate``, ``register``, ``fpca``, ``test``, ``pipeline`` and
``plot``. Options may also come from a flat ``key = value`` file given with
``--config``; command-line values win. Log verbosity follows the
``BINFDA_LOG_LEVEL`` environment variable (default WARNING).

Exit codes: 0 success, 1 a stage failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

from binfda.errors import ConfigError
from binfda.fdcore import DELAYS, read_trials, write_trials
from binfda.pipeline import (
    PipelineConfig,
    load_registration,
    run_fpca_stage,
    run_pipeline,
    run_test_stage,
    stage_dir,
    with_overrides,
    write_json,
    write_registration,
)
from binfda.registration import register

logger = logging.getLogger("binfda")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2

# config-file keys and the option they feed
_KEYS = {"input": str, "out": str, "stages": str, "seed": int, "permutations": int,
         "alpha": float, "d_grid": str, "ka": int, "kp": int, "components": int,
         "plots": str, "trial_scale": float, "workers": int}


def parse_stages(text: str) -> tuple:
    try:
        stages = tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad stage list {text!r}") from None
    return stages


def parse_d_grid(text: str) -> tuple:
    """``start:step:stop`` (inclusive) or a comma list."""
    text = str(text).replace(" ", "")
    try:
        if ":" in text:
            start, step, stop = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            return tuple(round(start + i * step, 10) for i in range(n))
        return tuple(float(x) for x in text.split(",") if x)
    except ValueError:
        raise ConfigError(f"bad D grid {text!r}") from None


def _parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines (``#`` comments); keys use underscores or dashes."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string("[pipeline]\n" + path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for key, raw in parser["pipeline"].items():
        key = key.replace("-", "_")
        if key not in _KEYS:
            raise ConfigError(f"{path}: unknown key {key!r}")
        try:
            out[key] = _KEYS[key](raw) if _KEYS[key] is not str else raw
        except ValueError:
            raise ConfigError(f"{path}: bad value for {key}: {raw!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("--input", help="trial file (CSV) or artifact directory")
    common.add_argument("--out", help="output directory")
    common.add_argument("--stages", help="comma-separated delays, subset of 0,2,4,8,16")
    common.add_argument("--seed", type=int)
    common.add_argument("--permutations", type=int, help="number of permutations B")
    common.add_argument("--alpha", type=float)
    common.add_argument("--d-grid", dest="d_grid", help="start:step:stop or comma list")
    common.add_argument("--ka", type=int, help="amplitude basis dimension")
    common.add_argument("--kp", type=int, help="phase basis dimension")
    common.add_argument("--components", type=int, help="FPCA components")
    common.add_argument("--no-plots", dest="plots", action="store_const", const="false")
    common.add_argument("--workers", type=int, help="stages run concurrently")

    parser = argparse.ArgumentParser(prog="binfda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="write a synthetic trial file")
    sim.add_argument("--trial-scale", dest="trial_scale", type=float,
                     help="multiply every stage's trial count")
    sub.add_parser("register", parents=[common], help="register each stage")
    sub.add_parser("fpca", parents=[common], help="weight selection and FPCA on registrations")
    sub.add_parser("test", parents=[common], help="permutation tests on registrations")
    sub.add_parser("pipeline", parents=[common], help="full analysis of a trial file")
    sub.add_parser("plot", parents=[common], help="render figures of a finished run")
    return parser


def resolve(args: argparse.Namespace) -> tuple[PipelineConfig, dict]:
    values = read_config_file(args.config) if args.config else {}
    for key in _KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    kw = {}
    if "input" in values:
        kw["input"] = str(values["input"])
    if "out" in values:
        kw["out"] = str(values["out"])
    if "stages" in values:
        kw["stages"] = parse_stages(values["stages"])
    if "d_grid" in values:
        kw["d_grid"] = parse_d_grid(values["d_grid"])
    if "plots" in values:
        kw["plots"] = _parse_bool(values["plots"])
    for key in ("seed", "permutations", "alpha", "components", "workers"):
        if key in values:
            kw[key] = values[key]
    try:
        config = with_overrides(PipelineConfig(), K_a=values.get("ka"), K_p=values.get("kp"), **kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return config, values


def _stage_loop(config: PipelineConfig, work) -> int:
    status = EXIT_OK
    for delay in config.stages:
        try:
            work(delay)
        except Exception as exc:
            logger.error("stage %d failed: %s: %s", delay, type(exc).__name__, exc)
            status = EXIT_STAGE
    return status


def cmd_simulate(config: PipelineConfig, values: dict) -> int:
    from binfda.synthgen import simulate_study, write_truth

    series, truths = simulate_study(config.seed, values.get("trial_scale", 1.0), config.stages)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trials(series, out / "trials.csv")
    write_truth(truths, out / "truth.json")
    print(out / "trials.csv")
    return EXIT_OK


def _require_input(config: PipelineConfig) -> Path:
    if not config.input:
        raise ConfigError("--input is required")
    path = Path(config.input)
    if not path.exists():
        raise ConfigError(f"input {path} does not exist")
    return path


def cmd_register(config: PipelineConfig, values: dict) -> int:
    series = read_trials(_require_input(config))

    def work(delay):
        data = [s for s in series if s.delay == delay]
        write_registration(register(data, config.registration), stage_dir(config.out, delay))

    return _stage_loop(config, work)


def cmd_fpca(config: PipelineConfig, values: dict) -> int:
    src = _require_input(config)

    def work(delay):
        reg = load_registration(stage_dir(src, delay))
        folder = stage_dir(config.out, delay)
        folder.mkdir(parents=True, exist_ok=True)
        _, summary = run_fpca_stage(reg, config, folder)
        write_json(folder / "fpca_summary.json", summary)

    return _stage_loop(config, work)


def cmd_test(config: PipelineConfig, values: dict) -> int:
    src = _require_input(config)

    def work(delay):
        reg = load_registration(stage_dir(src, delay))
        folder = stage_dir(config.out, delay)
        folder.mkdir(parents=True, exist_ok=True)
        run_test_stage(reg, config, folder)

    return _stage_loop(config, work)


def cmd_pipeline(config: PipelineConfig, values: dict) -> int:
    _require_input(config)
    return run_pipeline(config)


def cmd_plot(config: PipelineConfig, values: dict) -> int:
    from binfda.plots import render_plots

    target = Path(config.input or config.out)
    for path in render_plots(target):
        print(path)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "register": cmd_register, "fpca": cmd_fpca,
            "test": cmd_test, "pipeline": cmd_pipeline, "plot": cmd_plot}


def main(argv=None) -> int:
    level = os.environ.get("BINFDA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config, values = resolve(args)
        return COMMANDS[args.command](config, values)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
