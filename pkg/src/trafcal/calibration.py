"""Local per-region, per-interval calibration of a traffic model against counts."""
from __future__ import annotations

import bisect
import heapq
import math
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .counts import CountSeries, Sensor, TimeInterval, check_schedule
from .network import NoPathError, RoadNetwork, TreeRouter, dijkstra_indices
from .regions import RegionGrid
from .simulator import SimulationResult, SimulatorParams, TrafficModel, Vehicle, simulate


@dataclass
class CalibrationConfig:
    q: float = 0.15                 # convergence rate
    p_reroute: float = 0.2
    m: int = 5                      # max regional route length
    max_iters: int = 20             # S
    patience: int = 3               # w
    perturb_max: int = 20           # s of departure jitter
    epsilon_greedy: float = 0.01
    p_remove_transit: float = 0.5
    gamma: int = 200
    seed: int = 0

    def diagnostics(self) -> list[str]:
        out = []
        if not 0 < self.q <= 1:
            out.append("q: must lie in (0, 1]")
        if not 0 <= self.p_reroute <= 1:
            out.append("p_reroute: must lie in [0, 1]")
        if self.m < 1:
            out.append("m: must be >= 1")
        if self.max_iters < 1:
            out.append("max_iters: must be >= 1")
        if self.patience < 1:
            out.append("patience: must be >= 1")
        if self.perturb_max < 0:
            out.append("perturb_max: must be >= 0")
        if not 0 <= self.epsilon_greedy <= 1:
            out.append("epsilon_greedy: must lie in [0, 1]")
        if not 0 <= self.p_remove_transit <= 1:
            out.append("p_remove_transit: must lie in [0, 1]")
        if self.gamma < 0:
            out.append("gamma: must be >= 0")
        return out


@dataclass(frozen=True)
class RegionError:
    region: str
    interval: int
    epsilon: float
    d: int


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    model_size: int
    calib_seconds: float
    sim_seconds: float
    errors: list[RegionError] = field(default_factory=list)


@dataclass
class CalibrationHistory:
    initial_objective: float = math.nan
    initial_size: int = 0
    records: list[IterationRecord] = field(default_factory=list)
    best_iteration: int = 0
    simulations: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def objectives(self) -> list[float]:
        return [r.objective for r in self.records]

    def best_so_far(self, length: int | None = None) -> list[float]:
        """Running minimum starting from the initial objective (index 0).

        When ``length`` exceeds the recorded iterations the final value is
        carried forward, which is what a stopped run would keep returning.
        """
        out = [self.initial_objective]
        for r in self.records:
            out.append(min(out[-1], r.objective))
        if length is not None:
            out.extend([out[-1]] * max(0, length + 1 - len(out)))
        return out


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5))


# -- objective -------------------------------------------------------------

class RegionCounts:
    """Regional average counts for one sensor subset, precomputed per interval."""

    def __init__(self, grid: RegionGrid, sensors: Sequence[Sensor]):
        self.grid = grid
        self.by_region = grid.sensors_by_region(sensors)
        self.regions = list(self.by_region)

    def averages(self, counts: CountSeries) -> dict[str, list[float]]:
        out = {}
        for rid, sens in self.by_region.items():
            rows = counts.values[[counts._row[s.id] for s in sens]]
            out[rid] = [float(v) for v in rows.mean(axis=0)]
        return out


def objective(real: CountSeries, simulated: SimulationResult | CountSeries, grid: RegionGrid,
              intervals: Sequence[TimeInterval], active_sensors: Sequence[Sensor]) -> float:
    """Sum over intervals and sensor-bearing regions of |y - y_hat|."""
    return sum(region_objectives(real, simulated, grid, intervals, active_sensors).values())


def region_objectives(real: CountSeries, simulated, grid: RegionGrid,
                      intervals: Sequence[TimeInterval],
                      active_sensors: Sequence[Sensor]) -> dict[str, float]:
    sim = simulated.counts if isinstance(simulated, SimulationResult) else simulated
    rc = RegionCounts(grid, active_sensors)
    y, yh = rc.averages(real), rc.averages(sim)
    n = len(intervals)
    return {rid: sum(abs(y[rid][i] - yh[rid][i]) for i in range(n)) for rid in rc.regions}


def compute_region_errors(real: CountSeries, simulated, grid: RegionGrid, interval: int,
                          active_sensors: Sequence[Sensor], q: float) -> list[RegionError]:
    sim = simulated.counts if isinstance(simulated, SimulationResult) else simulated
    rc = RegionCounts(grid, active_sensors)
    y, yh = rc.averages(real), rc.averages(sim)
    out = []
    for rid in rc.regions:
        eps = y[rid][interval] - yh[rid][interval]
        out.append(RegionError(rid, interval, eps, round_half_away(eps * q)))
    return out


# -- random initial model --------------------------------------------------

def init_random_model(network: RoadNetwork, intervals: Sequence[TimeInterval], gamma: int,
                      rng: random.Random, max_retries: int = 20,
                      prefix: str = "init") -> TrafficModel:
    """Keep about ``gamma`` vehicles on the road at every tick.

    Activity is estimated from free-flow route durations; random OD edges
    are routed on free-flow weights.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    model = TrafficModel()
    if gamma == 0:
        return model
    router = TreeRouter(network)
    n_e = len(network.edge_ids)
    ids = network.edge_ids
    active: list[int] = []  # heap of estimated arrival ticks
    k = 0
    for t in range(intervals[0].start, intervals[-1].end):
        while active and active[0] <= t:
            heapq.heappop(active)
        while len(active) < gamma:
            path = None
            for _ in range(max_retries):
                o, d = rng.randrange(n_e), rng.randrange(n_e)
                try:
                    path = router.path(o, d)
                    break
                except NoPathError:
                    continue
            if path is None:
                break
            dur = max(1, math.ceil(router.cost(path)))
            heapq.heappush(active, t + dur)
            model.add(Vehicle(f"{prefix}{k}", t, tuple(ids[i] for i in path)))
            k += 1
    return model


# -- vehicle removal -------------------------------------------------------

def transit_index(result: SimulationResult, grid: RegionGrid,
                  intervals: Sequence[TimeInterval]) -> dict[tuple[str, int], list[str]]:
    """(region, interval) -> ids of vehicles that entered a region edge then."""
    starts = [iv.start for iv in intervals]
    region_of = [grid.edge_region.get(eid) for eid in result.edge_ids]
    out: dict[tuple[str, int], dict[str, None]] = {}
    for vid, trav in result.traversals.items():
        for e, t in trav:
            key = (region_of[e], bisect.bisect_right(starts, t) - 1)
            out.setdefault(key, {})[vid] = None
    return {k: list(v) for k, v in out.items()}


def _starts_in(v: Vehicle, grid: RegionGrid, region: str, iv: TimeInterval) -> bool:
    return grid.edge_region.get(v.route[0]) == region and iv.start <= v.depart < iv.end


def remove_vehicles(model: TrafficModel, grid: RegionGrid, intervals: Sequence[TimeInterval],
                    region: str, interval: int, d: int, rng: random.Random,
                    transit: Sequence[str] = (), p_remove_transit: float = 0.5,
                    start_pool: Sequence[str] | None = None) -> list[str]:
    """Remove up to ``d`` vehicles tied to ``region`` during ``interval``.

    Vehicles departing from the region in the interval go first. Once those
    run out, each remaining removal picks a random vehicle that crossed the
    region in the interval (per the last simulation) and removes it with
    probability ``p_remove_transit``. Returns the removed ids.
    """
    if d <= 0:
        return []
    iv = intervals[interval]
    if start_pool is None:
        start_pool = sorted(v.id for v in model if _starts_in(v, grid, region, iv))
    pool = [vid for vid in start_pool if vid in model]
    removed: list[str] = []
    while len(removed) < d and pool:
        j = rng.randrange(len(pool))
        pool[j], pool[-1] = pool[-1], pool[j]
        vid = pool.pop()
        model.remove(vid)
        removed.append(vid)
    candidates = [vid for vid in transit if vid in model]
    for _ in range(d - len(removed)):
        if not candidates:
            break
        j = rng.randrange(len(candidates))
        if rng.random() < p_remove_transit:
            candidates[j], candidates[-1] = candidates[-1], candidates[j]
            vid = candidates.pop()
            model.remove(vid)
            removed.append(vid)
    return removed


# -- vehicle addition ------------------------------------------------------

def _greedy(scores: Mapping[str, float], candidates: Sequence[str], eps: float,
            rng: random.Random) -> str:
    if not candidates:
        raise ValueError("empty candidate set")
    cands = sorted(candidates)
    if len(cands) == 1:
        rng.random()
        return cands[0]
    if rng.random() < eps:
        return cands[rng.randrange(len(cands))]
    # max score, lowest id on ties
    return min(cands, key=lambda c: (-scores.get(c, -math.inf), c))


def choose_nearby_region(candidates: Sequence[str], errors: Mapping[str, float],
                         epsilon_greedy: float, rng: random.Random) -> str:
    """Region with the largest real-minus-simulated error, explored with prob. eps."""
    return _greedy(errors, candidates, epsilon_greedy, rng)


def choose_pivot(sensor_edges: Sequence[str], differences: Mapping[str, float],
                 epsilon_greedy: float, rng: random.Random) -> str:
    """Sensor edge with the largest real-minus-simulated count, explored with prob. eps."""
    if not sensor_edges:
        raise ValueError("region has no sensor edge")
    return _greedy(differences, sensor_edges, epsilon_greedy, rng)


def build_regional_route(grid: RegionGrid, start: str, m: int, errors: Mapping[str, float],
                         eligible: set[str] | None, epsilon_greedy: float,
                         rng: random.Random) -> list[str]:
    phi = [start]
    while len(phi) < m:
        cands = [r for r in grid.neighbours(phi[-1])
                 if r not in phi and (eligible is None or r in eligible)]
        if not cands:
            break
        phi.append(choose_nearby_region(cands, errors, epsilon_greedy, rng))
    return phi


def pivot_route(network: RoadNetwork, pivots: Sequence[str],
                weight: Callable[[int], float]) -> tuple[list[str], int]:
    """Concatenate shortest segments through ``pivots``.

    Returns the edge route and how many pivots it reaches; routing stops at
    the first unroutable pair.
    """
    idx = network.index
    path = [idx[pivots[0]]]
    reached = 1
    for a, b in zip(pivots, pivots[1:]):
        try:
            seg = dijkstra_indices(network.succ, weight, idx[a], idx[b])
        except NoPathError:
            break
        path.extend(seg[1:])
        reached += 1
    return [network.edge_ids[i] for i in path], reached


def add_vehicle(network: RoadNetwork, grid: RegionGrid, model: TrafficModel, start_region: str,
                weight: Callable[[int], float], m: int, region_errors: Mapping[str, float],
                region_sensor_edges: Mapping[str, Sequence[str]],
                pivot_differences: Mapping[str, float], rng: random.Random,
                vehicle_id: str, depart: int, epsilon_greedy: float = 0.01) -> Vehicle:
    """Grow a regional route from ``start_region`` and route through one pivot per region."""
    if not region_sensor_edges.get(start_region):
        raise ValueError(f"region {start_region!r} has no sensor edge")
    phi = build_regional_route(grid, start_region, m, region_errors,
                               set(region_sensor_edges), epsilon_greedy, rng)
    pivots = [choose_pivot(region_sensor_edges[r], pivot_differences, epsilon_greedy, rng)
              for r in phi]
    route, reached = pivot_route(network, pivots, weight)
    if reached < len(pivots):
        phi = phi[:reached]
    vehicle = Vehicle(vehicle_id, depart, tuple(route), start_region, tuple(phi))
    model.add(vehicle)
    return vehicle


def schedule_starting_times(vehicles: Sequence[Vehicle], interval: TimeInterval,
                            perturb_max: int, rng: random.Random) -> None:
    """Spread departures evenly over the interval, jittered and clamped to it."""
    vs = sorted(vehicles, key=lambda v: (v.depart, v.id))
    n = len(vs)
    length = interval.end - interval.start
    for k, v in enumerate(vs):
        t = interval.start + (k * length) // n
        if perturb_max > 0:
            off = rng.randint(0, perturb_max)
            if rng.random() < 0.5:
                off = -off
            t += off
        v.depart = min(interval.end - 1, max(interval.start, t))


# -- main loop -------------------------------------------------------------

class _StartIndex:
    """(origin region, interval) -> vehicle ids, kept in sync with the model."""

    def __init__(self, model: TrafficModel, grid: RegionGrid, intervals: Sequence[TimeInterval]):
        self._starts = [iv.start for iv in intervals]
        self.grid = grid
        self.cells: dict[tuple[str, int], dict[str, None]] = {}
        for v in model:
            self.add(v)

    def key(self, v: Vehicle) -> tuple[str, int]:
        iv = bisect.bisect_right(self._starts, v.depart) - 1
        return self.grid.edge_region.get(v.route[0]), iv

    def add(self, v: Vehicle) -> None:
        self.cells.setdefault(self.key(v), {})[v.id] = None

    def get(self, region: str, interval: int) -> list[str]:
        return list(self.cells.get((region, interval), ()))

    def discard(self, region: str, interval: int, vids: Sequence[str]) -> None:
        cell = self.cells.get((region, interval))
        if cell:
            for vid in vids:
                cell.pop(vid, None)


def calibrate(network: RoadNetwork, grid: RegionGrid, real_counts: CountSeries,
              intervals: Sequence[TimeInterval], sensors_train: Sequence[Sensor],
              config: CalibrationConfig | None = None,
              initial_model: TrafficModel | None = None,
              sim_params: SimulatorParams | None = None) -> tuple[TrafficModel, CalibrationHistory]:
    """Iteratively add/remove vehicles per region and interval; return the best model."""
    config = config or CalibrationConfig()
    problems = config.diagnostics()
    if problems:
        raise ValueError("; ".join(problems))
    if not sensors_train:
        raise ValueError("empty training sensor set")
    check_schedule(intervals)
    for s in sensors_train:
        if s.id not in real_counts:
            raise ValueError(f"no real counts for sensor {s.id!r}")
    if real_counts.n_intervals != len(intervals):
        raise ValueError("real counts do not cover the interval schedule")
    sim_params = sim_params or SimulatorParams(p_reroute=config.p_reroute)
    rng = random.Random(config.seed)
    model = initial_model.copy() if initial_model is not None else \
        init_random_model(network, intervals, config.gamma, rng)
    for v in model:
        v.origin_region = grid.edge_region.get(v.route[0])

    rc = RegionCounts(grid, sensors_train)
    regions = rc.regions
    sensor_edges = {rid: [s.edge_id for s in sens] for rid, sens in rc.by_region.items()}
    y = rc.averages(real_counts)
    train_ids = [s.id for s in sensors_train]
    real_train = real_counts.subset(train_ids)
    history = CalibrationHistory()

    sim_seed = rng.randrange(2**31)

    def run(m: TrafficModel) -> SimulationResult:
        history.simulations += 1
        return simulate(network, m, sensors_train, intervals, sim_params, seed=sim_seed)

    def evaluate(res: SimulationResult) -> float:
        yh = rc.averages(res.counts)
        return sum(abs(y[r][i] - yh[r][i]) for r in regions for i in range(len(intervals)))

    last = run(model)
    history.initial_objective = evaluate(last)
    history.initial_size = len(model)
    best_obj, best_model = history.initial_objective, model.copy()
    stale = 0
    serial = 0
    for it in range(1, config.max_iters + 1):
        t_start = time.perf_counter()
        starts = _StartIndex(model, grid, intervals)
        transit = transit_index(last, grid, intervals)
        yh = rc.averages(last.counts)
        sim_counts = last.counts
        iter_errors: list[RegionError] = []
        for i, iv in enumerate(intervals):
            errs = {r: y[r][i] - yh[r][i] for r in regions}
            diffs = {s.edge_id: real_train.get(s.id, i) - sim_counts.get(s.id, i)
                     for s in sensors_train}
            weights: list[float] | None = None
            for r in regions:
                eps = errs[r]
                d = round_half_away(eps * config.q)
                iter_errors.append(RegionError(r, i, eps, d))
                if eps < 0 and d > 0:
                    gone = remove_vehicles(model, grid, intervals, r, i, d, rng,
                                           transit.get((r, i), ()), config.p_remove_transit,
                                           start_pool=starts.get(r, i))
                    starts.discard(r, i, gone)
                elif eps > 0 and d > 0:
                    if weights is None:
                        weights = last.travel_time_weights(i)
                    w = weights.__getitem__
                    for _ in range(d):
                        serial += 1
                        v = add_vehicle(network, grid, model, r, w, config.m, errs,
                                        sensor_edges, diffs, rng, f"it{it}v{serial}",
                                        iv.start, config.epsilon_greedy)
                        starts.add(v)
                pool = [model.vehicles[vid] for vid in starts.get(r, i) if vid in model]
                schedule_starting_times(pool, iv, config.perturb_max, rng)
        t_sim = time.perf_counter()
        last = run(model)
        obj = evaluate(last)
        t_end = time.perf_counter()
        history.records.append(IterationRecord(it, obj, len(model), t_sim - t_start,
                                               t_end - t_sim, iter_errors))
        if obj < best_obj:
            best_obj, best_model = obj, model.copy()
            history.best_iteration = it
            stale = 0
        else:
            stale += 1
        if obj == 0 or stale >= config.patience:
            break
    return best_model, history
