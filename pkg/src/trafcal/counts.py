"""Sensors, time schedules and count series shared by the real and simulated sides."""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Sensor:
    id: str
    edge_id: str


@dataclass(frozen=True)
class TimeInterval:
    start: int
    end: int

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError(f"interval end {self.end} must exceed start {self.start}")

    @property
    def length(self) -> int:
        return self.end - self.start

    def __contains__(self, t: float) -> bool:
        return self.start <= t < self.end


def make_schedule(n: int, length: int = 900, start: int = 0) -> list[TimeInterval]:
    return [TimeInterval(start + i * length, start + (i + 1) * length) for i in range(n)]


def check_schedule(intervals: Sequence[TimeInterval]) -> None:
    if not intervals:
        raise ValueError("empty interval schedule")
    for a, b in zip(intervals, intervals[1:]):
        if a.end != b.start:
            raise ValueError(f"intervals not contiguous at {a.end}/{b.start}")


def interval_index(intervals: Sequence[TimeInterval], t: float) -> int:
    """Index of the interval containing ``t`` or -1 when outside the schedule."""
    if t < intervals[0].start or t >= intervals[-1].end:
        return -1
    starts = [iv.start for iv in intervals]
    return bisect.bisect_right(starts, t) - 1


def check_sensors(sensors: Iterable[Sensor]) -> None:
    seen_ids: set[str] = set()
    seen_edges: set[str] = set()
    for s in sensors:
        if s.id in seen_ids:
            raise ValueError(f"duplicate sensor id {s.id!r}")
        if s.edge_id in seen_edges:
            raise ValueError(f"more than one sensor on edge {s.edge_id!r}")
        seen_ids.add(s.id)
        seen_edges.add(s.edge_id)


class CountSeries:
    """Vehicle counts indexed by ``(sensor id, interval index)``."""

    def __init__(self, sensor_ids: Sequence[str], values):
        self.sensor_ids: tuple[str, ...] = tuple(sensor_ids)
        self.values = np.asarray(values, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.sensor_ids):
            raise ValueError("counts must be a (sensors, intervals) array")
        if (self.values < 0).any():
            raise ValueError("counts must be non-negative")
        self._row = {sid: i for i, sid in enumerate(self.sensor_ids)}

    @classmethod
    def zeros(cls, sensor_ids: Sequence[str], n_intervals: int) -> "CountSeries":
        return cls(sensor_ids, np.zeros((len(sensor_ids), n_intervals), dtype=np.int64))

    @property
    def n_intervals(self) -> int:
        return self.values.shape[1]

    def get(self, sensor_id: str, interval: int) -> int:
        return int(self.values[self._row[sensor_id], interval])

    def row(self, sensor_id: str) -> np.ndarray:
        return self.values[self._row[sensor_id]]

    def subset(self, sensor_ids: Sequence[str]) -> "CountSeries":
        return CountSeries(sensor_ids, self.values[[self._row[s] for s in sensor_ids]])

    def __contains__(self, sensor_id: str) -> bool:
        return sensor_id in self._row

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountSeries):
            return NotImplemented
        return self.sensor_ids == other.sensor_ids and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"CountSeries({len(self.sensor_ids)} sensors x {self.n_intervals} intervals)"
