"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input-file error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import studies
from .errors import ConfigError, MwtomoError, NumericalError, ParseError, SolverError, UndefinedWeightError
from .io import read_measurements, write_contrast

log = logging.getLogger("mwtomo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

COMMANDS = {
    "phantom": "write the configured phantom as a contrast file",
    "simulate": "write the phantom and its noisy measurements",
    "invert": "run one inversion and write its trace, solution and summary",
    "degeneracy-demo": "show the contrast-adaptive criterion drifting to a degenerate minimizer",
    "lambda-sweep": "solution quality and cost across a grid of weights",
    "reg-study": "unregularized vs early-stopped vs regularized reconstructions",
    "race": "compare algorithms by operator count on one problem",
}

STUDY_OF = {"invert": "single-run", "degeneracy-demo": "degeneracy-demo", "lambda-sweep": "lambda-sweep",
            "reg-study": "reg-study", "race": "race"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mwtomo", description="2-D TM microwave tomography experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, text in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, help="JSON experiment configuration")
        p.add_argument("--output", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="noise seed (overrides setup.seed)")
        if name == "invert":
            p.add_argument("--data", type=Path, help="measurements file to invert instead of simulating")
    return parser


def _config(args) -> studies.ExperimentConfig:
    cfg = studies.load_config(args.config) if args.config else studies.ExperimentConfig()
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    out = args.output or cfg.output_dir or Path("runs") / args.command
    cfg = cfg.with_overrides(seed=args.seed, output_dir=out)
    if args.command in STUDY_OF:
        cfg = replace(cfg, study=STUDY_OF[args.command])
    return cfg


def _invert_file(cfg, path):
    problem = studies.build_problem(cfg)
    data = read_measurements(path)
    if data.data.shape != problem.data.data.shape:
        raise ConfigError(f"{path}: measurements are {data.data.shape[0]}x{data.data.shape[1]}, setup expects "
                          f"{problem.data.data.shape[0]}x{problem.data.data.shape[1]}")
    if data.frequency is not None and not np.isclose(data.frequency, cfg.setup.frequency, rtol=1e-12):
        raise ConfigError(f"{path}: frequency {data.frequency} differs from setup {cfg.setup.frequency}")
    # truth is only known for simulated data
    problem = replace(problem, data=data, truth=None)
    out = studies.prepare_output_dir(cfg, None)
    res = studies.invert(problem, cfg.inversion)
    studies.write_run(out, res, extra={"algorithm": cfg.inversion.algorithm, "data": str(path)})
    return res


def run(args) -> None:
    cfg = _config(args)
    cmd = args.command
    if cmd == "phantom":
        out = studies.prepare_output_dir(cfg, None)
        problem = studies.build_problem(cfg)
        write_contrast(out / "phantom.contrast", problem.truth)
    elif cmd == "simulate":
        studies.simulate(cfg)
    elif cmd == "invert" and args.data is not None:
        _invert_file(cfg, args.data)
    else:
        studies.run_study(cfg)
    print(f"{cmd}: wrote {cfg.output_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, ParseError) as exc:
        print(f"mwtomo: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, SolverError, UndefinedWeightError, FloatingPointError) as exc:
        print(f"mwtomo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MwtomoError as exc:
        print(f"mwtomo: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"mwtomo: cannot write output: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
