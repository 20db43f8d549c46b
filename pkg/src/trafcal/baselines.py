"""Comparison calibrators: SPSA over region-pair demand and a static route sampler."""
from __future__ import annotations

import heapq
import random
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .calibration import (CalibrationHistory, IterationRecord, RegionCounts,
                          init_random_model)
from .counts import CountSeries, Sensor, TimeInterval, check_schedule, interval_index
from .network import NoPathError, RoadNetwork, TreeRouter
from .regions import RegionGrid
from .simulator import SimulatorParams, TrafficModel, Vehicle, simulate


# -- generic SPSA ----------------------------------------------------------

def spsa_gradient(theta, delta_vec, c_k: float, objective_eval: Callable) -> np.ndarray:
    """Two-sided simultaneous-perturbation gradient estimate.

    ``delta_vec`` holds Rademacher entries; ``objective_eval`` is called
    exactly twice, at ``theta + c*delta`` and ``theta - c*delta``.
    """
    theta = np.asarray(theta, dtype=float)
    delta = np.asarray(delta_vec, dtype=float)
    if not c_k > 0:
        raise ValueError("c_k must be positive")
    if not np.all(np.abs(delta) == 1):
        raise ValueError("perturbation entries must be +1 or -1")
    j_plus = objective_eval(theta + c_k * delta)
    j_minus = objective_eval(theta - c_k * delta)
    return (j_plus - j_minus) / (2.0 * c_k * delta)


def rademacher(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=n) * 2.0 - 1.0


def spsa_gradient_avg(theta, c_k: float, objective_eval: Callable, rng: np.random.Generator,
                      n_avg: int = 1) -> np.ndarray:
    """Mean of ``n_avg`` independent gradient estimates (2 evaluations each)."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for _ in range(n_avg):
        g += spsa_gradient(theta, rademacher(theta.size, rng), c_k, objective_eval)
    return g / n_avg


def spsa_minimize(objective_eval: Callable, theta0, alpha: float = 30.0, c: float = 1.0,
                  iterations: int = 100, seed: int = 0, decay: bool = False,
                  lower: float | None = None, n_avg: int = 1) -> np.ndarray:
    """Plain SPSA descent: ``theta <- theta - a_k * g_hat``.

    With ``decay`` the step is ``alpha / (k + 1)``, otherwise constant.
    ``lower`` clips the iterate from below after each step.
    """
    rng = np.random.default_rng(seed)
    theta = np.array(theta0, dtype=float)
    for k in range(iterations):
        a_k = alpha / (k + 1) if decay else alpha
        theta = theta - a_k * spsa_gradient_avg(theta, c, objective_eval, rng, n_avg)
        if lower is not None:
            theta = np.maximum(theta, lower)
    return theta


# -- SPSA over region-pair demand ------------------------------------------

@dataclass
class SpsaConfig:
    alpha: float = 30.0
    c: float = 1.0
    iterations: int = 100           # K; further capped by max_simulations
    max_simulations: int | None = None
    theta0: Sequence[float] | None = None
    p_reroute: float = 0.2
    seed: int = 0

    def diagnostics(self) -> list[str]:
        out = []
        if self.alpha < 0:
            out.append("alpha: must be >= 0")
        if not self.c > 0:
            out.append("c: must be > 0")
        if self.iterations < 0:
            out.append("iterations: must be >= 0")
        if self.max_simulations is not None and self.max_simulations < 1:
            out.append("max_simulations: must be >= 1")
        return out


@dataclass
class SpsaHistory(CalibrationHistory):
    theta0: np.ndarray | None = None    # (intervals, pairs) starting point
    theta: np.ndarray | None = None     # final iterate
    pairs: list = field(default_factory=list)


@dataclass
class OdPair:
    a: str                      # region ids, a < b
    b: str
    routes: tuple[tuple[str, ...], ...]   # one or two directed pivot-to-pivot routes


def region_pivots(grid: RegionGrid, sensors: Sequence[Sensor], real: CountSeries) -> dict[str, str]:
    """Highest-total-count sensor edge per sensor-bearing region (ties by sensor id)."""
    out = {}
    for rid, sens in grid.sensors_by_region(sensors).items():
        best = min(sens, key=lambda s: (-int(real.row(s.id).sum()), s.id))
        out[rid] = best.edge_id
    return out


def od_pairs(network: RoadNetwork, pivots: dict[str, str]) -> list[OdPair]:
    router = TreeRouter(network)
    out = []
    for a, b in combinations(sorted(pivots), 2):
        routes = []
        for o, d in ((a, b), (b, a)):
            try:
                routes.append(router.route(pivots[o], pivots[d]))
            except NoPathError:
                pass
        if routes:
            out.append(OdPair(a, b, tuple(routes)))
    return out


def materialize(theta: np.ndarray, pairs: Sequence[OdPair],
                intervals: Sequence[TimeInterval]) -> TrafficModel:
    """Turn an (intervals x pairs) array into vehicles.

    ``round(theta)`` vehicles per cell, departures spread evenly over the
    interval and directions alternating between the two pivot routes.
    """
    model = TrafficModel()
    for i, iv in enumerate(intervals):
        for p, pair in enumerate(pairs):
            n = max(0, int(round(theta[i, p])))
            for j in range(n):
                model.add(Vehicle(f"od{i}_{p}_{j}", iv.start + (j * iv.length) // n,
                                  pair.routes[j % len(pair.routes)]))
    return model


def spsa_calibrate(network: RoadNetwork, grid: RegionGrid, real_counts: CountSeries,
                   intervals: Sequence[TimeInterval], sensors_train: Sequence[Sensor],
                   spsa_config: SpsaConfig | None = None,
                   sim_params: SimulatorParams | None = None
                   ) -> tuple[TrafficModel, SpsaHistory]:
    """SPSA on per-interval region-pair vehicle counts; return the best evaluated model.

    Every interval keeps its own parameter block and objective term, but
    one pair of simulations per iteration serves all intervals at once.
    """
    cfg = spsa_config or SpsaConfig()
    problems = cfg.diagnostics()
    if problems:
        raise ValueError("; ".join(problems))
    if not sensors_train:
        raise ValueError("empty training sensor set")
    check_schedule(intervals)
    sim_params = sim_params or SimulatorParams(p_reroute=cfg.p_reroute)
    rng = np.random.default_rng(cfg.seed)
    sim_seed = int(rng.integers(2**31))

    rc = RegionCounts(grid, sensors_train)
    regions = rc.regions
    y = rc.averages(real_counts)
    n_iv = len(intervals)
    pairs = od_pairs(network, region_pivots(grid, sensors_train, real_counts))
    history = SpsaHistory(pairs=pairs)

    train = real_counts.subset([s.id for s in sensors_train]).values
    if cfg.theta0 is not None:
        theta = np.asarray(cfg.theta0, dtype=float).reshape(n_iv, len(pairs))
    else:
        per_iv = train.mean(axis=0) / max(1, len(regions))
        theta = np.repeat(per_iv[:, None], len(pairs), axis=1)
    theta = np.maximum(np.round(theta), 0.0)
    history.theta0 = theta.copy()

    def evaluate(th: np.ndarray) -> tuple[np.ndarray, TrafficModel, float]:
        model = materialize(th, pairs, intervals)
        t0 = time.perf_counter()
        res = simulate(network, model, sensors_train, intervals, sim_params, seed=sim_seed)
        history.simulations += 1
        yh = rc.averages(res.counts)
        per = np.array([sum(abs(y[r][i] - yh[r][i]) for r in regions) for i in range(n_iv)])
        return per, model, time.perf_counter() - t0

    per0, best_model, _ = evaluate(theta)
    best_obj = float(per0.sum())
    history.initial_objective = best_obj
    history.initial_size = len(best_model)
    budget = cfg.iterations
    if cfg.max_simulations is not None:
        budget = min(budget, max(0, (cfg.max_simulations - 1) // 2))
    if not pairs:
        budget = 0
    for k in range(1, budget + 1):
        t0 = time.perf_counter()
        delta = rng.integers(0, 2, size=theta.shape) * 2.0 - 1.0
        th_plus = np.maximum(theta + cfg.c * delta, 0.0)
        th_minus = np.maximum(theta - cfg.c * delta, 0.0)
        j_plus, m_plus, s1 = evaluate(th_plus)
        j_minus, m_minus, s2 = evaluate(th_minus)
        grad = (j_plus - j_minus)[:, None] / (2.0 * cfg.c * delta)
        theta = np.maximum(np.round(theta - cfg.alpha * grad), 0.0)
        obj, model = min((float(j_plus.sum()), m_plus), (float(j_minus.sum()), m_minus),
                         key=lambda t: t[0])
        if obj < best_obj:
            best_obj, best_model = obj, model
            history.best_iteration = k
        elapsed = time.perf_counter() - t0
        history.records.append(IterationRecord(k, obj, len(model), elapsed - s1 - s2, s1 + s2))
    history.theta = theta
    return best_model, history


# -- route sampler ---------------------------------------------------------

@dataclass
class RoutePool:
    """Candidate trips: routes with a nominal departure second."""
    routes: list[tuple[str, ...]] = field(default_factory=list)
    departs: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.routes)

    def add(self, route: Sequence[str], depart: int) -> None:
        self.routes.append(tuple(route))
        self.departs.append(int(depart))

    @classmethod
    def from_model(cls, model: TrafficModel) -> "RoutePool":
        pool = cls()
        for v in model.sorted():
            pool.add(v.route, v.depart)
        return pool

    def validate(self, network: RoadNetwork) -> None:
        for k, r in enumerate(self.routes):
            if not network.is_valid_route(r):
                raise ValueError(f"pool trip {k} has an invalid route")


def static_hits(network: RoadNetwork, route: Sequence[str], depart: int,
                sensor_row: dict[str, int], intervals: Sequence[TimeInterval]
                ) -> dict[tuple[int, int], int]:
    """(sensor row, interval) -> times the trip enters that sensor edge, at free-flow pace."""
    out: dict[tuple[int, int], int] = {}
    t = float(depart)
    end = intervals[-1].end
    for eid in route:
        if t >= end:
            break
        row = sensor_row.get(eid)
        if row is not None:
            key = (row, interval_index(intervals, t))
            out[key] = out.get(key, 0) + 1
        t += network.free_flow[network.index[eid]]
    return out


def route_sampler_calibrate(network: RoadNetwork, pool: RoutePool, real_counts: CountSeries,
                            sensors_train: Sequence[Sensor],
                            intervals: Sequence[TimeInterval],
                            trace: list | None = None) -> TrafficModel:
    """Greedily pick pool trips that best fill the remaining count deficit.

    The residual is the summed positive part of real minus statically
    attributed counts. Each step takes the trip with the largest residual
    reduction (lowest pool index on ties) and stops when none helps.
    ``trace``, when given, receives ``(pool index, residual after)`` per step.
    """
    if len(pool) == 0:
        raise ValueError("empty route pool")
    check_schedule(intervals)
    ids = [s.id for s in sensors_train]
    sensor_row = {s.edge_id: k for k, s in enumerate(sensors_train)}
    deficit = real_counts.subset(ids).values.astype(np.int64).copy()
    hits = [static_hits(network, r, d, sensor_row, intervals)
            for r, d in zip(pool.routes, pool.departs)]

    def gain(h: dict[tuple[int, int], int]) -> int:
        return sum(min(c, int(deficit[key])) for key, c in h.items() if deficit[key] > 0)

    # gains only shrink as the deficit is filled, so stale heap entries are upper bounds
    heap = [(-gain(h), k) for k, h in enumerate(hits)]
    heapq.heapify(heap)
    chosen = []
    while heap:
        neg, k = heapq.heappop(heap)
        g = gain(hits[k])
        if g <= 0:
            continue
        if heap and (-g, k) > heap[0]:
            heapq.heappush(heap, (-g, k))
            continue
        chosen.append(k)
        for key, c in hits[k].items():
            deficit[key] = max(0, deficit[key] - c)
        if trace is not None:
            trace.append((k, int(deficit.sum())))
    model = TrafficModel()
    for k in sorted(chosen):
        model.add(Vehicle(f"rs{k}", pool.departs[k], pool.routes[k]))
    return model


def residual(network: RoadNetwork, model: TrafficModel, real_counts: CountSeries,
             sensors_train: Sequence[Sensor], intervals: Sequence[TimeInterval]) -> int:
    """Summed positive deficit of real counts over static attribution of ``model``."""
    ids = [s.id for s in sensors_train]
    sensor_row = {s.edge_id: k for k, s in enumerate(sensors_train)}
    static = np.zeros((len(ids), len(intervals)), dtype=np.int64)
    for v in model:
        for key, c in static_hits(network, v.route, v.depart, sensor_row, intervals).items():
            static[key] += c
    return int(np.maximum(real_counts.subset(ids).values - static, 0).sum())


def default_pool(network: RoadNetwork, intervals: Sequence[TimeInterval], gamma: int,
                 seed: int) -> RoutePool:
    """Random trips from the same initializer the local method starts from."""
    return RoutePool.from_model(init_random_model(network, intervals, gamma,
                                                  random.Random(seed)))
