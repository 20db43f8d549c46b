"""Square-grid partition of a road network into calibration regions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .counts import CountSeries, Sensor
from .network import RoadNetwork


class NoSensorError(LookupError):
    """Region has no sensor in the active subset."""


@dataclass(frozen=True)
class Region:
    id: str
    row: int
    col: int
    min_x: float
    min_y: float
    side: float
    edge_ids: frozenset[str]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return self.min_x, self.min_y, self.min_x + self.side, self.min_y + self.side


@dataclass(frozen=True)
class RegionalRoute:
    regions: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.regions)


def region_id(row: int, col: int) -> str:
    return f"r{row:02d}c{col:02d}"


def segment_hits_box(p: tuple[float, float], q: tuple[float, float],
                     box: tuple[float, float, float, float], tol: float = 0.0) -> bool:
    """Liang-Barsky test of segment ``pq`` against a closed axis-aligned box.

    ``tol`` grows the box on every side.
    """
    x0, y0 = p
    dx, dy = q[0] - x0, q[1] - y0
    xmin, ymin, xmax, ymax = box[0] - tol, box[1] - tol, box[2] + tol, box[3] + tol
    t0, t1 = 0.0, 1.0
    for d, lo, hi, v in ((dx, xmin, xmax, x0), (dy, ymin, ymax, y0)):
        if d == 0:
            if v < lo or v > hi:
                return False
            continue
        a, b = (lo - v) / d, (hi - v) / d
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
        if t0 > t1:
            return False
    return True


class RegionGrid:
    def __init__(self, regions: Sequence[Region], cell_size: float, origin: tuple[float, float]):
        self.cell_size = cell_size
        self.origin = origin
        self.regions: dict[str, Region] = {r.id: r for r in sorted(regions, key=lambda r: r.id)}
        self.edge_region: dict[str, str] = {}
        for r in self.regions.values():
            for eid in r.edge_ids:
                self.edge_region[eid] = r.id

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions.values())

    @property
    def ids(self) -> list[str]:
        return list(self.regions)

    def adjacent(self, a: str, b: str) -> bool:
        ra, rb = self.regions[a], self.regions[b]
        if a == b:
            return False
        return abs(ra.row - rb.row) <= 1 and abs(ra.col - rb.col) <= 1

    def neighbours(self, a: str) -> list[str]:
        return [b for b in self.regions if self.adjacent(a, b)]

    def region_of(self, edge_id: str) -> str:
        return self.edge_region[edge_id]

    def sensors_by_region(self, sensors: Iterable[Sensor]) -> dict[str, list[Sensor]]:
        out: dict[str, list[Sensor]] = {}
        for s in sensors:
            out.setdefault(self.edge_region[s.edge_id], []).append(s)
        for lst in out.values():
            lst.sort(key=lambda s: s.id)
        return dict(sorted(out.items()))

    def export_lines(self) -> list[str]:
        return [
            f"R {r.id} {r.min_x:g} {r.min_y:g} {r.side:g} " + " ".join(sorted(r.edge_ids))
            for r in self.regions.values()
        ]


def partition_grid(network: RoadNetwork, cell_size: float) -> RegionGrid:
    """Cover the network bounding box with square cells and assign edges.

    An edge goes to the first cell in row-major order (rows from the minimum
    y upwards) that its polyline touches; cells without edges are dropped.
    """
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    minx, miny, maxx, maxy = network.bounding_box()
    ncols = max(1, math.ceil((maxx - minx) / cell_size))
    nrows = max(1, math.ceil((maxy - miny) / cell_size))

    def cell_range(lo: float, hi: float, base: float, n: int) -> range:
        a = min(n - 1, max(0, math.floor((lo - base) / cell_size)))
        b = min(n - 1, max(0, math.floor((hi - base) / cell_size)))
        # a point on a cell boundary also touches the previous cell
        if a > 0 and math.isclose(lo - base, a * cell_size):
            a -= 1
        return range(a, b + 1)

    members: dict[tuple[int, int], list[str]] = {}
    for eid in network.edge_ids:
        geom = network.edges[eid].geometry
        best: tuple[int, int] | None = None
        for p, q in zip(geom, geom[1:]):
            rows = cell_range(min(p[1], q[1]), max(p[1], q[1]), miny, nrows)
            cols = cell_range(min(p[0], q[0]), max(p[0], q[0]), minx, ncols)
            for r in rows:
                if best is not None and r > best[0]:
                    break
                for c in cols:
                    if best is not None and (r, c) >= best:
                        break
                    box = (minx + c * cell_size, miny + r * cell_size,
                           minx + (c + 1) * cell_size, miny + (r + 1) * cell_size)
                    if segment_hits_box(p, q, box):
                        best = (r, c)
                        break
        if best is None:  # numerically outside every cell; clamp
            x, y = geom[0]
            best = (min(nrows - 1, int((y - miny) // cell_size)),
                    min(ncols - 1, int((x - minx) // cell_size)))
        members.setdefault(best, []).append(eid)

    regions = [
        Region(region_id(r, c), r, c, minx + c * cell_size, miny + r * cell_size,
               cell_size, frozenset(eids))
        for (r, c), eids in sorted(members.items())
    ]
    return RegionGrid(regions, cell_size, (minx, miny))


def adjacent(grid: RegionGrid, a: str, b: str) -> bool:
    """8-neighbourhood adjacency between two retained cells; irreflexive."""
    for rid in (a, b):
        if rid not in grid.regions:
            raise KeyError(f"unknown region {rid!r}")
    return grid.adjacent(a, b)


def region_average(counts: CountSeries, grid: RegionGrid, region: str, interval: int,
                   sensors: Iterable[Sensor]) -> float:
    """Mean count in ``interval`` over the given sensors located in ``region``."""
    vals = [counts.get(s.id, interval) for s in sensors
            if grid.edge_region.get(s.edge_id) == region]
    if not vals:
        raise NoSensorError(f"region {region!r} has no active sensor")
    return sum(vals) / len(vals)


def region_average_real(counts: CountSeries, grid: RegionGrid, region: str, interval: int,
                        sensors: Iterable[Sensor]) -> float:
    return region_average(counts, grid, region, interval, sensors)


def is_valid_regional_route(grid: RegionGrid, route: RegionalRoute, m: int) -> bool:
    regs = route.regions
    if not 1 <= len(regs) <= m or len(set(regs)) != len(regs):
        return False
    return all(grid.adjacent(a, b) for a, b in zip(regs, regs[1:]))
