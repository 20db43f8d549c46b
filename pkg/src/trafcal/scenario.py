"""Synthetic ground-truth scenarios and count ingestion."""
from __future__ import annotations

import csv
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .counts import CountSeries, Sensor, TimeInterval, make_schedule
from .network import NoPathError, RoadNetwork, TreeRouter, grid_network, save_network
from .regions import RegionGrid, partition_grid
from .simulator import SimulatorParams, TrafficModel, Vehicle, save_model, simulate


class CountsFormatError(ValueError):
    """Counts file is malformed, incomplete or inconsistent."""


# relative departures per interval, peak = 1
DEFAULT_PROFILE = (0.70, 0.75, 0.85, 1.0, 1.0, 0.85, 0.75, 0.70)


@dataclass
class ScenarioSpec:
    rows: int = 6
    cols: int = 6
    block: float = 1500.0
    speed: float = 8.33
    lanes: int = 1
    cell_size: float = 3000.0
    n_sensors: int = 12
    horizon: int = 7200
    interval: int = 900
    demand: tuple[int, ...] = ()        # departures per interval; empty -> peaked default
    peak_demand: int = 400            # departures in the busiest interval
    p_reroute: float = 0.2
    betweenness_samples: int = 2000
    seed: int = 0

    @property
    def n_intervals(self) -> int:
        return self.horizon // self.interval

    def departures(self) -> list[int]:
        if self.demand:
            return list(self.demand)
        n = self.n_intervals
        if n == len(DEFAULT_PROFILE):
            shape = list(DEFAULT_PROFILE)
        else:
            mid = (n - 1) / 2
            shape = [0.7 + 0.3 / (1.0 + ((i - mid) / max(1.0, n / 8)) ** 2) for i in range(n)]
        return [round(self.peak_demand * w) for w in shape]

    def diagnostics(self) -> list[str]:
        out = []
        if self.rows < 1 or self.cols < 1:
            out.append("rows/cols: must be >= 1")
        if not self.block > 0:
            out.append("block: must be > 0")
        if not self.speed > 0:
            out.append("speed: must be > 0")
        if self.lanes < 1:
            out.append("lanes: must be >= 1")
        if not self.cell_size > 0:
            out.append("cell_size: must be > 0")
        if self.interval <= 0 or self.horizon <= 0 or self.horizon % self.interval:
            out.append("interval: must divide horizon")
        n_edges = 2 * (self.rows * (self.cols + 1) + self.cols * (self.rows + 1))
        if not 0 < self.n_sensors <= n_edges:
            out.append(f"n_sensors: must lie in [1, {n_edges}]")
        if self.demand and len(self.demand) != self.n_intervals:
            out.append("demand: needs one entry per interval")
        if any(d < 0 for d in self.demand) or self.peak_demand < 0:
            out.append("demand: must be non-negative")
        return out

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return out

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ScenarioSpec":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                continue
            t = types[key]
            if "tuple" in str(t):
                kwargs[key] = tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
            elif t in ("int", int):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)


@dataclass
class Scenario:
    spec: ScenarioSpec
    network: RoadNetwork
    grid: RegionGrid
    sensors: list[Sensor]
    intervals: list[TimeInterval]
    truth: TrafficModel
    real_counts: CountSeries


def place_sensors(network: RoadNetwork, n: int, rng: random.Random,
                  samples: int = 2000) -> list[Sensor]:
    """Place sensors on the edges most used by sampled uniform-weight shortest paths.

    A tiny random jitter on the unit weights breaks the many equal-length
    ties of grid networks, which would otherwise all resolve the same way.
    """
    router = TreeRouter(network, [1.0 + 1e-3 * rng.random() for _ in network.edge_ids])
    use = [0] * len(network.edge_ids)
    n_e = len(use)
    for _ in range(samples):
        o, d = rng.randrange(n_e), rng.randrange(n_e)
        try:
            path = router.path(o, d)
        except NoPathError:
            continue
        for e in path:
            use[e] += 1
    order = sorted(range(n_e), key=lambda e: (-use[e], network.edge_ids[e]))
    width = len(str(n - 1))
    return [Sensor(f"s{k:0{width}d}", network.edge_ids[e]) for k, e in enumerate(order[:n])]


def random_trips(network: RoadNetwork, intervals: Sequence[TimeInterval],
                 departures: Sequence[int], rng: random.Random,
                 prefix: str = "gt") -> TrafficModel:
    router = TreeRouter(network)
    n_e = len(network.edge_ids)
    model = TrafficModel()
    k = 0
    for iv, n in zip(intervals, departures):
        times = sorted(rng.randrange(iv.start, iv.end) for _ in range(n))
        for t in times:
            # redraw pairs the turn rules leave disconnected (e.g. opposite loops of a ring)
            for _ in range(100):
                o = rng.randrange(n_e)
                d = rng.randrange(n_e - 1)
                d += d >= o
                try:
                    route = router.route(network.edge_ids[o], network.edge_ids[d])
                    break
                except NoPathError:
                    continue
            else:
                raise NoPathError("network has too few connected edge pairs")
            model.add(Vehicle(f"{prefix}{k}", t, route))
            k += 1
    return model


def generate_scenario(spec: ScenarioSpec) -> Scenario:
    problems = spec.diagnostics()
    if problems:
        raise ValueError("; ".join(problems))
    rng = random.Random(spec.seed)
    network = grid_network(spec.rows, spec.cols, spec.block, spec.speed, spec.lanes)
    grid = partition_grid(network, spec.cell_size)
    sensors = place_sensors(network, spec.n_sensors, rng, spec.betweenness_samples)
    intervals = make_schedule(spec.n_intervals, spec.interval)
    truth = random_trips(network, intervals, spec.departures(), rng)
    result = simulate(network, truth, sensors, intervals,
                      SimulatorParams(p_reroute=spec.p_reroute), seed=rng.randrange(2**31))
    return Scenario(spec, network, grid, sensors, intervals, truth, result.counts)


# -- files -----------------------------------------------------------------

def save_counts(path: str | Path, sensors: Sequence[Sensor], intervals: Sequence[TimeInterval],
                counts: CountSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "edge_id", "interval_start_s", "count"])
        for s in sensors:
            for i, iv in enumerate(intervals):
                w.writerow([s.id, s.edge_id, iv.start, counts.get(s.id, i)])


def load_counts(path: str | Path, network: RoadNetwork | None = None
                ) -> tuple[list[Sensor], list[TimeInterval], CountSeries]:
    """Read ``sensor_id,edge_id,interval_start_s,count`` rows into a complete series."""
    cells: dict[tuple[str, int], int] = {}
    sensor_edge: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != \
                ["sensor_id", "edge_id", "interval_start_s", "count"]:
            raise CountsFormatError("expected header sensor_id,edge_id,interval_start_s,count")
        for n, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise CountsFormatError(f"line {n}: expected 4 fields")
            sid, eid = row[0].strip(), row[1].strip()
            try:
                start, count = int(row[2]), int(row[3])
            except ValueError:
                raise CountsFormatError(f"line {n}: non-integer start or count") from None
            if count < 0:
                raise CountsFormatError(f"line {n}: negative count")
            if sensor_edge.setdefault(sid, eid) != eid:
                raise CountsFormatError(f"line {n}: sensor {sid!r} moved to edge {eid!r}")
            if (sid, start) in cells:
                raise CountsFormatError(f"line {n}: duplicate cell ({sid}, {start})")
            cells[(sid, start)] = count
    if not cells:
        raise CountsFormatError("no count rows")
    starts = sorted({s for _, s in cells})
    if len(starts) == 1:
        raise CountsFormatError("need at least two interval starts to infer the interval length")
    length = starts[1] - starts[0]
    for a, b in zip(starts, starts[1:]):
        if b - a != length:
            raise CountsFormatError(f"non-contiguous intervals at {a} -> {b}")
    intervals = [TimeInterval(s, s + length) for s in starts]
    sensors = [Sensor(sid, sensor_edge[sid]) for sid in sorted(sensor_edge)]
    edge_owner: dict[str, str] = {}
    for s in sensors:
        if network is not None and s.edge_id not in network.index:
            raise CountsFormatError(f"sensor {s.id!r} on unknown edge {s.edge_id!r}")
        if s.edge_id in edge_owner:
            raise CountsFormatError(f"edge {s.edge_id!r} carries two sensors")
        edge_owner[s.edge_id] = s.id
    values = []
    for s in sensors:
        row = []
        for st in starts:
            if (s.id, st) not in cells:
                raise CountsFormatError(f"missing count for sensor {s.id!r} at {st}")
            row.append(cells[(s.id, st)])
        values.append(row)
    return sensors, intervals, CountSeries([s.id for s in sensors], values)


def save_sensors(path: str | Path, sensors: Sequence[Sensor]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "edge_id"])
        for s in sensors:
            w.writerow([s.id, s.edge_id])


def write_bundle(scenario: Scenario, out: str | Path) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_network(scenario.network, out / "network.txt")
    save_counts(out / "counts.csv", scenario.sensors, scenario.intervals, scenario.real_counts)
    save_sensors(out / "sensors.csv", scenario.sensors)
    save_model(scenario.truth, out / "truth_model.txt")
    (out / "scenario.cfg").write_text("\n".join(scenario.spec.to_lines()) + "\n", encoding="utf-8")
    return out
