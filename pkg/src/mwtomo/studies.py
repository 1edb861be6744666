"""Experiment harness: configuration, single runs and the comparative studies.

Every study writes plain-text outputs (CSV traces, contrast files and a
``summary.txt`` of ``key: value`` lines) and returns an in-memory result
so tests can inspect it without re-reading files.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import criterion as crit
from .errors import ConfigError, MwtomoError
from .inversion import InversionOptions, InversionTrace, run_inversion
from .io import write_contrast, write_measurements, write_trace
from .model import (
    GridGeometry,
    ImagingSetup,
    MeasurementSet,
    ScatteringOperators,
    add_noise,
    build_grid,
    build_operators,
    forward_solve,
    make_phantom,
)

log = logging.getLogger(__name__)

STUDIES = ("single-run", "degeneracy-demo", "lambda-sweep", "reg-study", "race")
DEFAULT_LAMBDA_GRID = tuple(float(10.0 ** e) for e in np.arange(-4.0, 1.01, 0.5))
DEFAULT_RACE = ("csi", "acg-csi", "simultaneous-cg", "simultaneous-pcg")


@dataclass(frozen=True)
class RaceEntry:
    name: str
    options: InversionOptions


@dataclass(frozen=True)
class ExperimentConfig:
    setup: ImagingSetup = field(default_factory=ImagingSetup)
    phantom: str = "small-square"
    snr_db: float = 20.0
    inversion: InversionOptions = field(default_factory=InversionOptions)
    study: str = "single-run"
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    reg_lambda: float = 0.001
    race: tuple = ()
    race_budget: int = 1000
    output_dir: str | None = None

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        grid = tuple(float(v) for v in self.lambda_grid)
        if any(v <= 0 for v in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("lambda_grid must be positive and strictly increasing")
        if self.study == "lambda-sweep" and not grid:
            raise ConfigError("lambda-sweep needs a non-empty lambda_grid")
        if self.study == "race" and not self.race:
            raise ConfigError("race needs at least one entry")
        if self.race_budget < 1:
            raise ConfigError("race_budget must be >= 1")
        if not self.reg_lambda > 0:
            raise ConfigError("reg_lambda must be > 0")
        object.__setattr__(self, "lambda_grid", grid)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        setup = d.pop("setup", {})
        try:
            setup = ImagingSetup(**setup)
        except TypeError as exc:
            raise ConfigError(f"bad setup section: {exc}") from None
        inv = d.pop("inversion", {})
        base = InversionOptions.from_dict(inv)
        race = []
        default = [{"name": a, "algorithm": a} for a in DEFAULT_RACE]
        for j, entry in enumerate(d.pop("race", default)):
            if not isinstance(entry, dict):
                raise ConfigError(f"race entry {j} must be an object")
            entry = dict(entry)
            name = str(entry.pop("name", f"run{j}"))
            race.append(RaceEntry(name, InversionOptions.from_dict({**inv, **entry})))
        names = [r.name for r in race]
        if len(set(names)) != len(names):
            raise ConfigError("race entry names must be unique")
        return cls(setup=setup, inversion=base, race=tuple(race), **d)

    def with_overrides(self, seed=None, output_dir=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, setup=replace(cfg.setup, seed=int(seed)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)


@dataclass
class Problem:
    setup: ImagingSetup
    grid: GridGeometry
    ops: ScatteringOperators
    truth: np.ndarray
    W_true: np.ndarray
    clean: MeasurementSet
    data: MeasurementSet


def build_problem(cfg: ExperimentConfig) -> Problem:
    s = cfg.setup
    grid = build_grid(s)
    ops = build_operators(s, grid)
    truth = make_phantom(cfg.phantom, grid, wavelength=s.wavelength)
    W, clean = forward_solve(truth, ops)
    clean = replace(clean, frequency=s.frequency)
    data = add_noise(clean, cfg.snr_db, s.seed)
    return Problem(s, grid, ops, truth, W, clean, data)


def prepare_output_dir(cfg, out) -> Path:
    path = out if out is not None else cfg.output_dir
    if path is None:
        raise ConfigError("no output directory given")
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from None
    return path


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def write_summary(path, items: dict) -> None:
    lines = [f"{k}: {_fmt(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# -- single run --------------------------------------------------------------------


@dataclass
class RunResult:
    x: np.ndarray
    W: np.ndarray
    trace: InversionTrace
    wall_time: float

    @property
    def final(self):
        return self.trace.rows[-1]


def invert(problem: Problem, opts: InversionOptions, observer=None) -> RunResult:
    t0 = time.perf_counter()
    state, trace = run_inversion(problem.ops, problem.data, opts, truth=problem.truth, observer=observer)
    return RunResult(state.x, state.W, trace, time.perf_counter() - t0)


def write_run(out: Path, res: RunResult, prefix="", extra=None) -> None:
    write_trace(out / f"{prefix}trace.csv", res.trace)
    write_contrast(out / f"{prefix}solution.contrast", res.x)
    last = res.final
    items = {"final_F": last.F, "delta_x": last.mse, "iterations": last.iter, "op_count": last.op_count,
             "wall_time_s": res.wall_time, "stop_reason": res.trace.stop_reason}
    items.update(extra or {})
    write_summary(out / f"{prefix}summary.txt", items)


def run_experiment(cfg: ExperimentConfig, out=None) -> RunResult:
    out = prepare_output_dir(cfg, out)
    problem = build_problem(cfg)
    res = invert(problem, cfg.inversion)
    write_run(out, res, extra={"algorithm": cfg.inversion.algorithm, "phantom": cfg.phantom})
    return res


def simulate(cfg: ExperimentConfig, out=None) -> Problem:
    out = prepare_output_dir(cfg, out)
    problem = build_problem(cfg)
    write_contrast(out / "phantom.contrast", problem.truth)
    write_measurements(out / "measurements.txt", problem.data)
    return problem


# -- degeneracy ----------------------------------------------------------------------


@dataclass
class DegeneracyResult:
    degenerate: bool
    f_ratio: float
    max_abs_x: float
    max_abs_truth: float
    field_ratio: float
    blow_up_pixel: int
    run: RunResult
    history: list


def is_degenerate(f0, f_final, max_abs_x, max_abs_truth, field_ratio) -> bool:
    """F fell below 1% of its start while the contrast blew up behind a dark pixel."""
    return bool(f_final < 0.01 * f0 and max_abs_x > 10 * max_abs_truth and field_ratio < 0.05)


def degeneracy_demo(cfg: ExperimentConfig, out=None) -> DegeneracyResult:
    """Exact-gradient CSI run under the contrast-adaptive weight, no regularization."""
    out = prepare_output_dir(cfg, out)
    problem = build_problem(cfg)
    opts = replace(cfg.inversion, algorithm="csi", lam=crit.CSI, lambda_reg=0.0, gradient_mode="exact")
    history = []
    last_finite = {}

    def observer(k, x, W):
        ax = float(np.max(np.abs(x)))
        history.append((k, ax))
        if np.all(np.isfinite(x)) and np.all(np.isfinite(W)):
            last_finite["xW"] = (x.copy(), W.copy())

    res = invert(problem, opts, observer)
    x, W = last_finite["xW"]
    rows = [r for r in res.trace.rows if math.isfinite(r.F)]
    ops = problem.ops
    etot = ops.incident + ops.couple(W)
    k = int(np.argmax(np.abs(x)))
    field_ratio = float(np.linalg.norm(etot[:, k]) / np.linalg.norm(ops.incident[:, k]))
    max_abs_x = float(np.max(np.abs(x)))
    max_abs_truth = float(np.max(np.abs(problem.truth)))
    f0, f1 = rows[0].F, rows[-1].F
    flag = is_degenerate(f0, f1, max_abs_x, max_abs_truth, field_ratio)

    res = replace(res, x=x, W=W)
    write_run(out, res, extra={"degenerate": "yes" if flag else "no", "F_ratio": f1 / f0,
                               "max_abs_x": max_abs_x, "max_abs_truth": max_abs_truth,
                               "blow_up_pixel": k, "field_ratio_at_blow_up": field_ratio})
    lam = {r.iter: r.lam for r in res.trace.rows}
    F = {r.iter: r.F for r in res.trace.rows}
    _write_csv(out / "degeneracy.csv", ["iter", "F", "lambda", "max_abs_x"],
               [(it, F[it], lam[it], ax) for it, ax in history])
    _write_csv(out / "total_field.csv", ["illumination", "pixel", "abs_total_field", "abs_incident_field"],
               [(i, m, float(abs(etot[i, m])), float(abs(ops.incident[i, m])))
                for i in range(etot.shape[0]) for m in range(etot.shape[1])])
    return DegeneracyResult(flag, f1 / f0, max_abs_x, max_abs_truth, field_ratio, k, res, history)


# -- lambda sweep --------------------------------------------------------------------


@dataclass
class SweepRow:
    lam: float
    mse: float
    wall_time: float
    op_count: int
    iterations: int
    stop_reason: str
    error: str = ""


@dataclass
class SweepResult:
    rows: list
    spearman: float
    top_decade_variation: float


def top_decade_variation(lams, values) -> float:
    """(max - min) / min of ``values`` over the grid points within a decade of the largest weight."""
    lams, values = np.asarray(lams, float), np.asarray(values, float)
    sel = (lams >= lams.max() / 10) & np.isfinite(values)
    if not np.any(sel):
        return math.nan
    v = values[sel]
    return float((v.max() - v.min()) / v.min())


def lambda_sweep(cfg: ExperimentConfig, out=None) -> SweepResult:
    out = prepare_output_dir(cfg, out)
    problem = build_problem(cfg)
    rows = []
    for j, lam in enumerate(cfg.lambda_grid):
        opts = replace(cfg.inversion, lam=float(lam))
        try:
            res = invert(problem, opts)
        except MwtomoError as exc:
            log.warning("lambda=%g failed: %s", lam, exc)
            rows.append(SweepRow(lam, math.nan, math.nan, -1, -1, "error", str(exc)))
            continue
        write_trace(out / f"trace_{j:02d}.csv", res.trace)
        last = res.final
        rows.append(SweepRow(lam, last.mse, res.wall_time, last.op_count, last.iter, res.trace.stop_reason))
    ok = [r for r in rows if not r.error]
    rho = math.nan
    if len(ok) >= 2:
        rho = float(stats.spearmanr([r.lam for r in ok], [r.op_count for r in ok]).statistic)
    var = top_decade_variation([r.lam for r in ok], [r.mse for r in ok]) if ok else math.nan
    _write_csv(out / "lambda_sweep.csv", ["lambda", "delta_x", "wall_time_s", "op_count", "iterations",
                                          "stop_reason", "error"],
               [dataclasses.astuple(r) for r in rows])
    write_summary(out / "summary.txt", {"spearman_ops_vs_lambda": rho, "top_decade_variation": var,
                                        "runs": len(rows), "failed": len(rows) - len(ok)})
    return SweepResult(rows, rho, var)


# -- regularization vs early stopping ----------------------------------------------------


@dataclass
class RegStudyResult:
    mse_unregularized: float
    mse_early_stopped: float
    early_stop_iter: int
    mse_regularized: float
    runs: dict


def reg_study(cfg: ExperimentConfig, out=None) -> RegStudyResult:
    """(a) no penalty, (b) the same run stopped where its error is least, (c) penalized."""
    out = prepare_output_dir(cfg, out)
    problem = build_problem(cfg)
    best = {"mse": math.inf}

    def observer(k, x, W):
        err = crit.mse(x, problem.truth)
        if err < best["mse"]:
            best.update(mse=err, iter=k, x=x.copy())

    a = invert(problem, replace(cfg.inversion, lambda_reg=0.0), observer)
    c = invert(problem, replace(cfg.inversion, lambda_reg=cfg.reg_lambda))
    write_run(out, a, prefix="a_")
    write_contrast(out / "b_solution.contrast", best["x"])
    write_run(out, c, prefix="c_")
    _write_csv(out / "reg_study.csv", ["run", "lambda_reg", "iterations", "delta_x"],
               [("a", 0.0, a.final.iter, a.final.mse), ("b", 0.0, best["iter"], best["mse"]),
                ("c", cfg.reg_lambda, c.final.iter, c.final.mse)])
    write_summary(out / "summary.txt", {"delta_x_a": a.final.mse, "delta_x_b": best["mse"],
                                        "early_stop_iter": best["iter"], "delta_x_c": c.final.mse})
    return RegStudyResult(a.final.mse, best["mse"], best["iter"], c.final.mse, {"a": a, "c": c})


# -- races --------------------------------------------------------------------------------


def value_at_budget(trace: InversionTrace, budget) -> float:
    """F at the last recorded iterate whose cumulative operator count fits the budget."""
    ops = trace.column("op_count")
    i = int(np.searchsorted(ops, budget, side="right")) - 1
    return float(trace.rows[i].F) if i >= 0 else math.nan


def ops_to_reach(trace: InversionTrace, target) -> int | None:
    """Operator count at the first iterate with F <= target (None if never)."""
    hit = np.nonzero(trace.column("F") <= target)[0]
    return int(trace.rows[hit[0]].op_count) if hit.size else None


@dataclass
class RaceResult:
    runs: dict
    target: float = math.nan
    ops_to_target: dict = field(default_factory=dict)


def race(cfg: ExperimentConfig, out=None) -> RaceResult:
    out = prepare_output_dir(cfg, out)
    problem = build_problem(cfg)
    runs = {}
    for entry in cfg.race:
        res = invert(problem, entry.options)
        runs[entry.name] = res
        write_run(out, res, prefix=f"{entry.name}_", extra={"algorithm": entry.options.algorithm})
    budget = cfg.race_budget
    ref = cfg.race[0].name
    target = value_at_budget(runs[ref].trace, budget)
    rows = []
    for e in cfg.race:
        tr, last = runs[e.name].trace, runs[e.name].final
        reach = ops_to_reach(tr, target)
        rows.append((e.name, e.options.algorithm, last.F, last.op_count, last.mse,
                     value_at_budget(tr, budget), "" if reach is None else reach))
    _write_csv(out / "race.csv", ["name", "algorithm", "final_F", "op_count", "delta_x", "F_at_budget",
                                  f"ops_to_reach_{ref}_F_at_budget"], rows)
    write_summary(out / "summary.txt", {"reference": ref, "budget_ops": budget, "target_F": target,
                                        **{f"ops_to_reach_{r[0]}": r[6] if r[6] != "" else "never" for r in rows}})
    return RaceResult(runs, target, {r[0]: (r[6] if r[6] != "" else None) for r in rows})


def run_study(cfg: ExperimentConfig, out=None):
    return {"single-run": run_experiment, "degeneracy-demo": degeneracy_demo, "lambda-sweep": lambda_sweep,
            "reg-study": reg_study, "race": race}[cfg.study](cfg, out)
