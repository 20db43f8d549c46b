"""Deterministic mesoscopic queue simulator.

Each edge is a FIFO queue. A vehicle entering an edge stays on it for at
least its free-flow time; it then leaves when the edge's outflow budget
(saturation flow, accumulated fractionally per tick) allows it and the next
edge on its route accepts entries. Entries are refused when an edge is full
or its occupancy exceeds the jam fraction of its storage, which makes queues
spill back upstream.
"""
from __future__ import annotations

import bisect
import copy
import heapq
import math
import random
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .counts import CountSeries, Sensor, TimeInterval, check_schedule, check_sensors
from .network import NoPathError, RoadNetwork, dijkstra_indices


class SimulationError(ValueError):
    """Model incompatible with the network or schedule."""


@dataclass(slots=True)
class Vehicle:
    id: str
    depart: int
    route: tuple[str, ...]
    origin_region: str | None = None
    regional_route: tuple[str, ...] = ()


class TrafficModel:
    """A set of vehicles keyed by unique id."""

    def __init__(self, vehicles: Iterable[Vehicle] = ()):
        self.vehicles: dict[str, Vehicle] = {}
        for v in vehicles:
            self.add(v)

    def add(self, vehicle: Vehicle) -> None:
        if vehicle.id in self.vehicles:
            raise ValueError(f"duplicate vehicle id {vehicle.id!r}")
        if not vehicle.route:
            raise ValueError(f"vehicle {vehicle.id!r} has an empty route")
        self.vehicles[vehicle.id] = vehicle

    def remove(self, vehicle_id: str) -> Vehicle:
        return self.vehicles.pop(vehicle_id)

    def __len__(self) -> int:
        return len(self.vehicles)

    def __iter__(self):
        return iter(self.vehicles.values())

    def __contains__(self, vehicle_id: str) -> bool:
        return vehicle_id in self.vehicles

    def copy(self) -> "TrafficModel":
        out = TrafficModel()
        out.vehicles = {k: copy.copy(v) for k, v in self.vehicles.items()}
        return out

    def sorted(self) -> list[Vehicle]:
        return sorted(self.vehicles.values(), key=lambda v: (v.depart, v.id))


@dataclass
class SimulatorParams:
    vehicle_length: float = 7.5        # m of storage per queued vehicle
    saturation_flow: float = 1800.0    # veh/h/lane
    jam_threshold: float = 0.4         # occupancy fraction blocking entries
    max_insert_delay: int = 300        # s an insertion may be retried
    p_reroute: float = 0.2
    reroute_window: int = 100          # s of travel times used for re-routing


@dataclass
class SimulationResult:
    counts: CountSeries
    edge_ids: list[str]
    free_flow: list[float]
    tt_sum: np.ndarray                  # (edges, intervals) seconds
    tt_n: np.ndarray                    # (edges, intervals) traversals
    traversals: dict[str, list[tuple[int, int]]]  # vid -> [(edge index, entry tick)]
    final_routes: dict[str, tuple[str, ...]]
    arrivals: dict[str, int] = field(default_factory=dict)   # vid -> tick it left its last edge
    total: int = 0
    inserted: int = 0
    completed: int = 0
    en_route: int = 0
    dropped: int = 0
    pending: int = 0
    dropped_ids: list[str] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {eid: i for i, eid in enumerate(self.edge_ids)}

    @property
    def n_intervals(self) -> int:
        return self.tt_sum.shape[1]

    def mean_travel_time(self, edge_id: str, interval: int) -> float:
        if not 0 <= interval < self.n_intervals:
            raise IndexError(f"unknown interval {interval}")
        i = self._index[edge_id]
        n = self.tt_n[i, interval]
        return float(self.tt_sum[i, interval] / n) if n else self.free_flow[i]

    def travel_time_weights(self, interval: int) -> list[float]:
        """Per-edge-index mean travel time in ``interval`` with free-flow fallback."""
        if not 0 <= interval < self.n_intervals:
            raise IndexError(f"unknown interval {interval}")
        n = self.tt_n[:, interval]
        s = self.tt_sum[:, interval]
        ff = self.free_flow
        return [float(s[i] / n[i]) if n[i] else ff[i] for i in range(len(ff))]

    @property
    def travel_times(self) -> dict[tuple[str, int], float]:
        out = {}
        for i, j in zip(*np.nonzero(self.tt_n)):
            out[(self.edge_ids[i], int(j))] = float(self.tt_sum[i, j] / self.tt_n[i, j])
        return out


def _draw(salt: bytes, vid: str, hop: int) -> float:
    """Uniform [0, 1) draw keyed by vehicle and hop.

    Keying the re-routing coin on the vehicle instead of a shared stream
    keeps draws of unchanged vehicles fixed when other vehicles are added or
    removed, so successive calibration iterations see less simulation noise.
    """
    return zlib.crc32(salt + f"{vid}:{hop}".encode()) / 4294967296.0


def simulate(network: RoadNetwork, model: TrafficModel, sensors: Sequence[Sensor],
             intervals: Sequence[TimeInterval], params: SimulatorParams | None = None,
             seed: int = 0) -> SimulationResult:
    """Run the queue model over the full schedule with a 1 s tick."""
    params = params or SimulatorParams()
    check_schedule(intervals)
    check_sensors(sensors)
    t0, t_end = intervals[0].start, intervals[-1].end
    starts = [iv.start for iv in intervals]
    n_int = len(intervals)
    index = network.index
    succ = network.succ
    n_e = len(network.edge_ids)
    ff = network.free_flow
    ff_ticks = [max(1, math.ceil(w - 1e-9)) for w in ff]
    edges = [network.edges[eid] for eid in network.edge_ids]
    storage = [max(1, math.floor(e.length * e.lanes / params.vehicle_length)) for e in edges]
    jam_cap = [min(s, math.floor(params.jam_threshold * s) + 1) for s in storage]
    rate = [e.lanes * params.saturation_flow / 3600.0 for e in edges]
    cap = [max(1.0, r) for r in rate]
    sensor_row = [-1] * n_e
    for k, s in enumerate(sensors):
        if s.edge_id not in index:
            raise SimulationError(f"sensor {s.id!r} on unknown edge {s.edge_id!r}")
        sensor_row[index[s.edge_id]] = k
    counts = [[0] * n_int for _ in sensors]
    tt_sum = [[0.0] * n_int for _ in range(n_e)]
    tt_n = [[0] * n_int for _ in range(n_e)]

    vehicles = model.sorted()
    vids = [v.id for v in vehicles]
    routes: list[list[int]] = []
    for v in vehicles:
        try:
            routes.append([index[e] for e in v.route])
        except KeyError as exc:
            raise SimulationError(f"vehicle {v.id!r} uses unknown edge {exc.args[0]!r}") from None
        if not t0 <= v.depart < t_end:
            raise SimulationError(f"vehicle {v.id!r} departs at {v.depart} outside the schedule")
    n_v = len(vehicles)
    pos = [0] * n_v
    entry = [0] * n_v
    ready = [0] * n_v
    drawn = [-1] * n_v
    trav: list[list[tuple[int, int]]] = [[] for _ in range(n_v)]

    queues = [deque() for _ in range(n_e)]
    budget = list(cap)
    budget_t = [t0] * n_e
    waiting_on: list[set[int]] = [set() for _ in range(n_e)]
    insert_q = [deque() for _ in range(n_e)]
    # window of recent exits per edge for re-routing
    win = [deque() for _ in range(n_e)]
    win_sum = [0.0] * n_e
    window = params.reroute_window
    p_re = params.p_reroute
    salt = f"{seed}:".encode()

    move_at: dict[int, set[int]] = {}
    insert_at: dict[int, set[int]] = {}
    ticks: list[int] = []
    queued_ticks: set[int] = set()
    next_wake = [None] * n_e
    completed = inserted = dropped = 0
    arrived: dict[str, int] = {}
    dropped_ids: list[str] = []

    def push_tick(t: int) -> None:
        if t not in queued_ticks:
            queued_ticks.add(t)
            heapq.heappush(ticks, t)

    def wake(e: int, t: int) -> None:
        nw = next_wake[e]
        if nw is not None and nw <= t:
            return
        next_wake[e] = t
        push_tick(t)
        move_at.setdefault(t, set()).add(e)

    def want_insert(e: int, t: int) -> None:
        push_tick(t)
        insert_at.setdefault(t, set()).add(e)

    def enter(v: int, e: int, t: int) -> None:
        q = queues[e]
        entry[v] = t
        ready[v] = t + ff_ticks[e]
        q.append(v)
        trav[v].append((e, t))
        k = sensor_row[e]
        if k >= 0:
            counts[k][bisect.bisect_right(starts, t) - 1] += 1
        if len(q) == 1:
            wake(e, ready[v])

    def can_enter(e: int) -> bool:
        return len(queues[e]) < jam_cap[e]

    def window_weight(t: int):
        lo = t - window

        def w(e: int) -> float:
            d = win[e]
            while d and d[0][0] <= lo:
                win_sum[e] -= d.popleft()[1]
            return win_sum[e] / len(d) if d else ff[e]
        return w

    def freed(e: int, t: int) -> None:
        ws = waiting_on[e]
        if ws:
            for u in ws:
                wake(u, t + 1)
            ws.clear()
        if insert_q[e]:
            want_insert(e, t)

    def process_edge(e: int, t: int) -> None:
        nonlocal completed
        q = queues[e]
        while q:
            v = q[0]
            if ready[v] > t:
                wake(e, ready[v])
                return
            r = routes[v]
            p = pos[v]
            if drawn[v] != p:
                drawn[v] = p
                if p_re > 0 and p < len(r) - 1 and _draw(salt, vids[v], p) < p_re:
                    try:
                        tail = dijkstra_indices(succ, window_weight(t), e, r[-1])
                    except NoPathError:
                        tail = None
                    if tail is not None:
                        r[p:] = tail
            b = budget[e] + rate[e] * (t - budget_t[e])
            if b > cap[e]:
                b = cap[e]
            budget[e] = b
            budget_t[e] = t
            if b < 1.0:
                wake(e, t + max(1, math.ceil((1.0 - b) / rate[e] - 1e-9)))
                return
            nxt = r[p + 1] if p + 1 < len(r) else -1
            if nxt >= 0 and not can_enter(nxt):
                waiting_on[nxt].add(e)
                return
            q.popleft()
            budget[e] = b - 1.0
            tt = t - entry[v]
            j = bisect.bisect_right(starts, t) - 1
            tt_sum[e][j] += tt
            tt_n[e][j] += 1
            if p_re > 0:
                win[e].append((t, tt))
                win_sum[e] += tt
            freed(e, t)
            if nxt >= 0:
                pos[v] = p + 1
                enter(v, nxt, t)
            else:
                pos[v] = p + 1
                completed += 1
                arrived[vids[v]] = t

    dep_i = 0
    if n_v:
        push_tick(max(t0, vehicles[0].depart))
    while ticks:
        t = heapq.heappop(ticks)
        queued_ticks.discard(t)
        if t >= t_end:
            break
        moves = move_at.pop(t, None)
        if moves:
            for e in sorted(moves):
                if next_wake[e] == t:
                    next_wake[e] = None
                    process_edge(e, t)
        while dep_i < n_v and vehicles[dep_i].depart == t:
            o = routes[dep_i][0]
            insert_q[o].append(dep_i)
            insert_at.setdefault(t, set()).add(o)
            dep_i += 1
        if dep_i < n_v:
            push_tick(vehicles[dep_i].depart)
        ins = insert_at.pop(t, None)
        if ins:
            for e in sorted(ins):
                iq = insert_q[e]
                while iq:
                    v = iq[0]
                    if t - vehicles[v].depart > params.max_insert_delay:
                        iq.popleft()
                        dropped += 1
                        dropped_ids.append(vids[v])
                        continue
                    if not can_enter(e):
                        break
                    iq.popleft()
                    inserted += 1
                    enter(v, e, t)
                # blocked insertions are re-checked when the edge frees up;
                # expiry is only observable at that point or at the horizon
    pending = 0
    for e in range(n_e):
        for v in insert_q[e]:
            if (t_end - 1) - vehicles[v].depart > params.max_insert_delay:
                dropped += 1
                dropped_ids.append(vids[v])
            else:
                pending += 1
    en_route = inserted - completed
    return SimulationResult(
        counts=CountSeries([s.id for s in sensors],
                           np.array(counts, dtype=np.int64).reshape(len(sensors), n_int)),
        edge_ids=list(network.edge_ids),
        free_flow=list(ff),
        tt_sum=np.array(tt_sum, dtype=float).reshape(n_e, n_int),
        tt_n=np.array(tt_n, dtype=np.int64).reshape(n_e, n_int),
        traversals={vids[v]: trav[v] for v in range(n_v) if trav[v]},
        final_routes={vids[v]: tuple(network.edge_ids[i] for i in routes[v]) for v in range(n_v)},
        arrivals=dict(sorted(arrived.items())),
        total=n_v, inserted=inserted, completed=completed, en_route=en_route,
        dropped=dropped, pending=pending, dropped_ids=dropped_ids,
    )


def region_average_simulated(result: SimulationResult, grid, region: str, interval: int,
                             active_sensors: Sequence[Sensor]) -> float:
    """Simulated counterpart of the real regional average."""
    from .regions import region_average
    return region_average(result.counts, grid, region, interval, active_sensors)


# -- model file ------------------------------------------------------------

def format_model(model: TrafficModel) -> str:
    lines = [f"V {v.id} {v.depart} " + " ".join(v.route) for v in model.sorted()]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_model(text: str) -> TrafficModel:
    model = TrafficModel()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] != "V" or len(tok) < 4:
            raise ValueError(f"line {n}: expected 'V <id> <depart_s> <edge>...'")
        try:
            depart = int(tok[2])
        except ValueError:
            raise ValueError(f"line {n}: bad departure {tok[2]!r}") from None
        model.add(Vehicle(tok[1], depart, tuple(tok[3:])))
    return model


def save_model(model: TrafficModel, path: str | Path) -> None:
    Path(path).write_text(format_model(model), encoding="utf-8")


def load_model(path: str | Path) -> TrafficModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))
