"""Command line front-end: generate scenarios, run calibrations, recompute metrics."""
from __future__ import annotations

import argparse
import csv
import math
import random
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import SpsaConfig, default_pool, route_sampler_calibrate, spsa_calibrate
from .calibration import (CalibrationConfig, CalibrationHistory, IterationRecord, calibrate,
                          objective)
from .counts import Sensor
from .metrics import make_folds, metric_report
from .network import load_network
from .regions import partition_grid
from .scenario import ScenarioSpec, generate_scenario, load_counts, write_bundle
from .simulator import SimulatorParams, load_model, save_model, simulate

METHODS = ("local", "spsa", "routesampler")


class ConfigError(ValueError):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


@dataclass
class RunConfig:
    scenario: str | None = None        # ScenarioSpec file
    network: str | None = None
    counts: str | None = None
    out: str = "runs"
    method: str = "local"
    reps: int = 1
    folds: int = 3
    cell_size: float | None = None     # None: scenario value, or 2000 m for data paths
    seed: int = 0
    jobs: int = 1
    timings: bool = False
    plots: bool = True
    # local method
    q: float = 0.15
    p_reroute: float = 0.2
    m: int = 5
    max_iters: int = 20
    patience: int = 3
    perturb_max: int = 20
    epsilon_greedy: float = 0.01
    p_remove_transit: float = 0.5
    gamma: int = 200
    # spsa
    alpha: float = 30.0
    c: float = 1.0
    spsa_iters: int = 100
    spsa_max_sims: int | None = None   # None: the local method's budget, max_iters + 1
    unknown: list[str] = field(default_factory=list)

    def calibration(self, seed: int) -> CalibrationConfig:
        return CalibrationConfig(q=self.q, p_reroute=self.p_reroute, m=self.m,
                                 max_iters=self.max_iters, patience=self.patience,
                                 perturb_max=self.perturb_max,
                                 epsilon_greedy=self.epsilon_greedy,
                                 p_remove_transit=self.p_remove_transit,
                                 gamma=self.gamma, seed=seed)

    def spsa(self, seed: int) -> SpsaConfig:
        budget = self.spsa_max_sims if self.spsa_max_sims is not None else self.max_iters + 1
        return SpsaConfig(alpha=self.alpha, c=self.c, iterations=self.spsa_iters,
                          max_simulations=budget, p_reroute=self.p_reroute, seed=seed)


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _convert(name: str, raw: str):
    kind = {f.name: str(f.type) for f in fields(RunConfig)}[name]
    if raw.lower() in ("none", "") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if raw.lower() not in _BOOL:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def build_config(values: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    names = {f.name for f in fields(RunConfig)} - {"unknown"}
    for key, raw in values.items():
        if key not in names:
            cfg.unknown.append(key)
            continue
        try:
            setattr(cfg, key, _convert(key, raw))
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    return cfg


def validate_config(config: RunConfig) -> list[str]:
    """Every violated constraint as ``field: message``; empty means runnable."""
    out = [f"{k}: unknown key" for k in config.unknown]
    has_paths = config.network is not None or config.counts is not None
    if config.scenario is not None and has_paths:
        out.append("scenario: give either a scenario spec or data paths, not both")
    elif config.scenario is None and not has_paths:
        out.append("scenario: need a scenario spec or network and counts paths")
    elif has_paths and (config.network is None or config.counts is None):
        out.append("network/counts: both paths are required")
    if config.method not in METHODS:
        out.append(f"method: must be one of {', '.join(METHODS)}")
    if config.reps < 1:
        out.append("reps: must be >= 1")
    if config.folds < 1:
        out.append("folds: must be >= 1")
    if config.jobs < 1:
        out.append("jobs: must be >= 1")
    if config.cell_size is not None and not config.cell_size > 0:
        out.append("cell_size: must be > 0")
    out += [f"calibration.{d}" for d in config.calibration(config.seed).diagnostics()]
    out += [f"spsa.{d}" for d in config.spsa(config.seed).diagnostics()]
    if config.spsa_iters < 0:
        out.append("spsa_iters: must be >= 0")
    return out


# -- inputs ------------------------------------------------------------------

@dataclass
class Inputs:
    network: object
    grid: object
    sensors: list
    intervals: list
    counts: object


def load_inputs(config: RunConfig) -> Inputs:
    if config.scenario is not None:
        spec = ScenarioSpec.from_mapping(read_config(config.scenario))
        sc = generate_scenario(spec)
        cell = config.cell_size or spec.cell_size
        grid = sc.grid if cell == spec.cell_size else partition_grid(sc.network, cell)
        return Inputs(sc.network, grid, sc.sensors, sc.intervals, sc.real_counts)
    network = load_network(config.network)
    sensors, intervals, counts = load_counts(config.counts, network)
    grid = partition_grid(network, config.cell_size or 2000.0)
    return Inputs(network, grid, sensors, intervals, counts)


def derive_seed(master: int, fold: int, rep: int) -> int:
    return random.Random(f"trafcal:{master}:{fold}:{rep}").randrange(2**31)


# -- output helpers ------------------------------------------------------------

def _num(x: float) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x != x:
        return "nan"
    return f"{x:.10g}"


def _write(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_history(path: Path, history: CalibrationHistory, method: str, timings: bool) -> None:
    def t(x: float) -> str:
        return f"{x:.6f}" if timings else ""

    rows = [[0, _num(history.initial_objective), history.initial_size, "", "", method]]
    rows += [[r.iteration, _num(r.objective), r.model_size, t(r.calib_seconds),
              t(r.sim_seconds), method] for r in history.records]
    _write(path, ["iteration", "objective", "model_size", "calib_seconds", "sim_seconds",
                  "method"], rows)


def write_region_errors(path: Path, history: CalibrationHistory) -> None:
    rows = [[r.iteration, e.interval, e.region, _num(e.epsilon), e.d]
            for r in history.records for e in r.errors]
    _write(path, ["iteration", "interval", "region", "epsilon", "d"], rows)


# -- one calibration run ---------------------------------------------------------

def calibrate_with(method: str, config: RunConfig, inputs: Inputs, train: list[Sensor],
                   seed: int):
    params = SimulatorParams(p_reroute=config.p_reroute)
    if method == "local":
        return calibrate(inputs.network, inputs.grid, inputs.counts, inputs.intervals, train,
                         config.calibration(seed), sim_params=params)
    if method == "spsa":
        return spsa_calibrate(inputs.network, inputs.grid, inputs.counts, inputs.intervals,
                              train, config.spsa(seed), sim_params=params)
    if method == "routesampler":
        pool = default_pool(inputs.network, inputs.intervals, config.gamma, seed)
        model = route_sampler_calibrate(inputs.network, pool, inputs.counts, train,
                                        inputs.intervals)
        res = simulate(inputs.network, model, train, inputs.intervals, params, seed=seed)
        obj = objective(inputs.counts, res, inputs.grid, inputs.intervals, train)
        hist = CalibrationHistory(initial_objective=math.nan, initial_size=len(pool),
                                  records=[IterationRecord(1, obj, len(model), 0.0, 0.0)],
                                  best_iteration=1, simulations=1)
        return model, hist
    raise ConfigError(f"unknown method {method!r}")


def run_one(config: RunConfig, inputs: Inputs, fold, rep: int, out: Path) -> dict:
    seed = derive_seed(config.seed, fold.fold, rep)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {s.id: s for s in inputs.sensors}
    train = [by_id[i] for i in fold.train]
    model, history = calibrate_with(config.method, config, inputs, train, seed)
    save_model(model, out / "model.txt")
    write_history(out / "history.csv", history, config.method, config.timings)
    write_region_errors(out / "region_errors.csv", history)
    res = simulate(inputs.network, model, inputs.sensors, inputs.intervals,
                   SimulatorParams(p_reroute=config.p_reroute), seed=seed)
    starts = [iv.start for iv in inputs.intervals]
    row = {"fold": fold.fold, "rep": rep, "seed": seed,
           "objective": objective(inputs.counts, res, inputs.grid, inputs.intervals, train),
           "iterations": len(history), "simulations": history.simulations,
           "model_size": len(model)}
    for split, ids in (("train", fold.train), ("test", fold.test)):
        if not ids:
            continue
        rep_ = metric_report(inputs.counts, res.counts, ids, starts)
        rep_.write_csv(out / split)
        for k, v in rep_.summary().items():
            row[f"{split}_{k}"] = v
        if config.plots:
            from .plotting import render_report
            render_report(rep_, out / split)
    if config.plots:
        from .plotting import plot_convergence
        objs = [history.initial_objective] + history.objectives
        plot_convergence([o for o in objs if o == o], out / "convergence.png")
    return row


def _run_job(args):
    config, fold, rep, out = args
    return run_one(config, load_inputs(config), fold, rep, out)


SUMMARY_HEADER = ["method", "metric", "mean", "std", "n"]


def summarize(rows: list[dict]) -> list[tuple[str, float, float, int]]:
    """Mean and sample standard deviation per metric over runs."""
    out = []
    for k in sorted({k for r in rows for k in r} - {"fold", "rep", "seed"}):
        vals = np.array([r[k] for r in rows if k in r], dtype=float)
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append((k, float(vals.mean()), sd, int(vals.size)))
    return out


def write_summary(out: Path, method: str, rows: list[dict]) -> Path:
    """Merge this method's rows into ``summary.csv`` (one block per method)."""
    path = out / "summary.csv"
    kept = []
    if path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            kept = [r for r in csv.reader(fh)][1:]
        kept = [r for r in kept if r and r[0] != method]
    new = [[method, k, _num(m), _num(s), n] for k, m, s, n in summarize(rows)]
    allrows = sorted(kept + new, key=lambda r: (r[0], r[1]))
    _write(path, SUMMARY_HEADER, allrows)
    runs = out / method / "runs.csv"
    cols = list(rows[0])
    for r in rows:
        cols += [k for k in r if k not in cols]
    _write(runs, cols, [[_num(r[c]) if c in r else "" for c in cols] for r in rows])
    return path


def run_experiment(config: RunConfig) -> int:
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    inputs = load_inputs(config)
    folds = make_folds([s.id for s in inputs.sensors], config.folds, config.seed)
    out = Path(config.out)
    base = out / config.method
    jobs = [(f, r, base / f"fold{f.fold}_rep{r}") for f in folds for r in range(config.reps)]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(_run_job, [(config, f, r, d) for f, r, d in jobs]))
    else:
        rows = [run_one(config, inputs, f, r, d) for f, r, d in jobs]
    write_summary(out, config.method, rows)
    return 0


# -- argument parsing -------------------------------------------------------------

FLAG_KEYS = ("seed", "jobs", "out", "method", "cell_size", "q", "p_reroute", "m",
             "max_iters", "patience", "gamma", "reps", "folds", "scenario", "network",
             "counts", "perturb_max", "epsilon_greedy", "alpha", "c", "spsa_iters",
             "spsa_max_sims")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--scenario", "--spec", dest="scenario", help="scenario spec file")
    p.add_argument("--bundle", help="scenario bundle directory (network.txt, counts.csv)")
    p.add_argument("--network")
    p.add_argument("--counts")
    p.add_argument("--out")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--reps", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--cell-size", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--p-reroute", type=float)
    p.add_argument("--m", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--gamma", type=int)
    p.add_argument("--perturb-max", type=int)
    p.add_argument("--epsilon-greedy", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--spsa-iters", type=int)
    p.add_argument("--spsa-max-sims", type=int)
    p.add_argument("--timings", action="store_true", default=None,
                   help="record wall-clock columns in history.csv")
    p.add_argument("--no-plots", dest="plots", action="store_false", default=None)


def config_from_args(args: argparse.Namespace) -> RunConfig:
    values = read_config(args.config) if args.config else {}
    if args.bundle:
        values["network"] = str(Path(args.bundle) / "network.txt")
        values["counts"] = str(Path(args.bundle) / "counts.csv")
        echo = Path(args.bundle) / "scenario.cfg"
        if echo.exists() and "cell_size" not in values:
            # keep the region size the bundle was generated with
            values["cell_size"] = read_config(echo).get("cell_size", "2000")
    for k in FLAG_KEYS + ("timings", "plots"):
        v = getattr(args, k, None)
        if v is not None:
            values[k] = str(v)
    return build_config(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafcal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scenario bundle")
    g.add_argument("--spec", "--scenario", dest="spec", help="scenario spec file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    r = sub.add_parser("run", help="calibrate over folds and repetitions")
    _add_run_flags(r)

    v = sub.add_parser("validate", help="check a run configuration")
    _add_run_flags(v)

    mt = sub.add_parser("metrics", help="metric report of a model against counts")
    mt.add_argument("--network", required=True)
    mt.add_argument("--counts", required=True)
    mt.add_argument("--model", required=True)
    mt.add_argument("--out", required=True)
    mt.add_argument("--seed", type=int, default=0)
    mt.add_argument("--p-reroute", type=float, default=0.2)
    mt.add_argument("--sensors", help="comma separated sensor ids (default: all)")
    mt.add_argument("--no-plots", dest="plots", action="store_false")
    return parser


def cmd_generate(args) -> int:
    values = read_config(args.spec) if args.spec else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = ScenarioSpec.from_mapping(values)
    problems = spec.diagnostics()
    if problems:
        raise ConfigError("; ".join(problems))
    out = write_bundle(generate_scenario(spec), args.out)
    print(f"scenario written to {out}")
    return 0


def cmd_metrics(args) -> int:
    network = load_network(args.network)
    sensors, intervals, counts = load_counts(args.counts, network)
    model = load_model(args.model)
    res = simulate(network, model, sensors, intervals, SimulatorParams(p_reroute=args.p_reroute),
                   seed=args.seed)
    ids = args.sensors.split(",") if args.sensors else [s.id for s in sensors]
    missing = [i for i in ids if i not in counts]
    if missing:
        raise ConfigError(f"unknown sensor ids: {', '.join(missing)}")
    report = metric_report(counts, res.counts, ids, [iv.start for iv in intervals])
    report.write_csv(args.out)
    if args.plots:
        from .plotting import render_report
        render_report(report, args.out)
    for k, val in report.summary().items():
        print(f"{k} = {_num(val)}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "metrics":
            return cmd_metrics(args)
        config = config_from_args(args)
        if args.command == "validate":
            problems = validate_config(config)
            for p in problems:
                print(p)
            if not problems:
                print("ok")
            return 1 if problems else 0
        return run_experiment(config)
    except Exception as exc:  # any module error becomes a non-zero exit
        print(f"trafcal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
