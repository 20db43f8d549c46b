"""Goodness-of-fit metrics, report tables and cross-validation folds."""
from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .counts import CountSeries


def _pair(simulated, real) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(simulated, dtype=float).ravel()
    r = np.asarray(real, dtype=float).ravel()
    if s.shape != r.shape:
        raise ValueError(f"length mismatch: {s.size} simulated vs {r.size} real")
    if s.size == 0:
        raise ValueError("need at least one observation")
    return s, r


def mae(simulated, real) -> float:
    s, r = _pair(simulated, real)
    return float(np.mean(np.abs(r - s)))


def rmse(simulated, real) -> float:
    s, r = _pair(simulated, real)
    return float(np.sqrt(np.mean((r - s) ** 2)))


def geh(simulated: float, real: float) -> float:
    """GEH statistic; defined as 0 when both volumes are 0."""
    total = simulated + real
    if total <= 0:
        return 0.0
    return math.sqrt(2.0 * (simulated - real) ** 2 / total)


def geh_matrix(simulated: np.ndarray, real: np.ndarray) -> np.ndarray:
    s = np.asarray(simulated, dtype=float)
    r = np.asarray(real, dtype=float)
    total = s + r
    out = np.zeros_like(total)
    nz = total > 0
    out[nz] = np.sqrt(2.0 * (s[nz] - r[nz]) ** 2 / total[nz])
    return out


def geh_pass_fraction(simulated: np.ndarray, real: np.ndarray, threshold: float = 5.0) -> np.ndarray:
    """Per interval (column), the fraction of sensors (rows) with GEH below ``threshold``."""
    g = geh_matrix(simulated, real)
    if g.shape[0] == 0:
        raise ValueError("need at least one sensor")
    return (g < threshold).mean(axis=0)


def normalized_rmse_series(by: str, real: np.ndarray, simulated: np.ndarray,
                           normalizer: str = "std") -> np.ndarray:
    """RMSE per sensor (``by="sensor"``) or per interval (``by="time"``), normalised.

    ``normalizer="std"`` divides by the standard deviation of the matching
    real series; ``"mad"`` divides by the mean absolute count difference of
    that series. Entries with a zero normaliser are NaN (undefined).
    """
    r = np.asarray(real, dtype=float)
    s = np.asarray(simulated, dtype=float)
    if r.shape != s.shape:
        raise ValueError("shape mismatch")
    axis = {"sensor": 1, "time": 0}[by]
    diff = r - s
    err = np.sqrt(np.mean(diff ** 2, axis=axis))
    if normalizer == "std":
        norm = np.std(r, axis=axis)
    elif normalizer == "mad":
        norm = np.mean(np.abs(diff), axis=axis)
    else:
        raise ValueError(f"unknown normalizer {normalizer!r}")
    out = np.full(err.shape, np.nan)
    ok = norm > 0
    out[ok] = err[ok] / norm[ok]
    # a perfect fit is 0 whatever the spread of the real series
    out[err == 0] = 0.0
    return out


@dataclass
class ParetoBin:
    lower: float
    upper: float
    count: int
    cumulative_pct: float


def pareto_bins(values: Sequence[float], width: float) -> list[ParetoBin]:
    """Histogram at multiples of ``width``, sorted by descending frequency."""
    if not width > 0:
        raise ValueError("bin width must be positive")
    hist: dict[int, int] = {}
    for v in values:
        k = int(math.floor(v / width))
        hist[k] = hist.get(k, 0) + 1
    total = sum(hist.values())
    out = []
    running = 0
    for k, c in sorted(hist.items(), key=lambda kv: (-kv[1], kv[0])):
        running += c
        out.append(ParetoBin(k * width, (k + 1) * width, c, 100.0 * running / total))
    return out


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: tuple[str, ...]
    test: tuple[str, ...]


def make_folds(sensor_ids: Sequence[str], k: int = 3, seed: int = 0,
               train_fraction: float = 0.7) -> list[FoldSplit]:
    """``k`` independent seeded train/test resamples of the sensor set."""
    ids = sorted(sensor_ids)
    n = len(ids)
    if k < 1 or n < k:
        raise ValueError(f"need at least {k} sensors for {k} folds, got {n}")
    n_train = int(math.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n)
    out = []
    for f in range(k):
        rng = random.Random(f"{seed}:{f}")
        perm = ids[:]
        rng.shuffle(perm)
        out.append(FoldSplit(f, tuple(sorted(perm[:n_train])), tuple(sorted(perm[n_train:]))))
    return out


@dataclass
class MetricReport:
    sensor_ids: list[str]
    interval_starts: list[int]
    real: np.ndarray
    simulated: np.ndarray
    mae_by_sensor: np.ndarray = field(init=False)
    rmse_by_sensor: np.ndarray = field(init=False)
    mae_by_interval: np.ndarray = field(init=False)
    rmse_by_interval: np.ndarray = field(init=False)
    nrmse_time_std: np.ndarray = field(init=False)
    nrmse_time_mad: np.ndarray = field(init=False)
    nrmse_sensor_std: np.ndarray = field(init=False)
    nrmse_sensor_mad: np.ndarray = field(init=False)
    geh: np.ndarray = field(init=False)
    geh_pass: np.ndarray = field(init=False)
    volume_real: np.ndarray = field(init=False)
    volume_sim: np.ndarray = field(init=False)
    pareto: list[ParetoBin] = field(init=False)
    pareto_width: float = 5.0

    def __post_init__(self):
        r, s = self.real.astype(float), self.simulated.astype(float)
        diff = np.abs(r - s)
        self.mae_by_sensor = diff.mean(axis=1)
        self.rmse_by_sensor = np.sqrt(((r - s) ** 2).mean(axis=1))
        self.mae_by_interval = diff.mean(axis=0)
        self.rmse_by_interval = np.sqrt(((r - s) ** 2).mean(axis=0))
        self.nrmse_time_std = normalized_rmse_series("time", r, s, "std")
        self.nrmse_time_mad = normalized_rmse_series("time", r, s, "mad")
        self.nrmse_sensor_std = normalized_rmse_series("sensor", r, s, "std")
        self.nrmse_sensor_mad = normalized_rmse_series("sensor", r, s, "mad")
        self.geh = geh_matrix(s, r)
        self.geh_pass = (self.geh < 5.0).mean(axis=0)
        self.volume_real = r.sum(axis=0)
        self.volume_sim = s.sum(axis=0)
        self.pareto = pareto_bins(self.mae_by_sensor, self.pareto_width)

    @property
    def mae(self) -> float:
        return float(self.mae_by_sensor.mean())

    @property
    def rmse(self) -> float:
        return rmse(self.simulated, self.real)

    def summary(self) -> dict[str, float]:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "geh_pass": float(self.geh_pass.mean()),
            "volume_real": float(self.volume_real.sum()),
            "volume_sim": float(self.volume_sim.sum()),
        }

    def write_csv(self, out: str | Path) -> list[Path]:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def table(name: str, header: list[str], rows) -> None:
            p = out / name
            with open(p, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            written.append(p)

        table("mae_by_sensor.csv", ["sensor_id", "mae", "rmse", "nrmse_std", "nrmse_mad"],
              [[sid, _f(a), _f(b), _f(c), _f(d)] for sid, a, b, c, d in zip(
                  self.sensor_ids, self.mae_by_sensor, self.rmse_by_sensor,
                  self.nrmse_sensor_std, self.nrmse_sensor_mad)])
        table("rmse_by_interval.csv",
              ["interval_start_s", "mae", "rmse", "nrmse_std", "nrmse_mad"],
              [[t, _f(a), _f(b), _f(c), _f(d)] for t, a, b, c, d in zip(
                  self.interval_starts, self.mae_by_interval, self.rmse_by_interval,
                  self.nrmse_time_std, self.nrmse_time_mad)])
        table("geh_pass.csv", ["interval_start_s", "geh_pass_fraction"],
              [[t, _f(g)] for t, g in zip(self.interval_starts, self.geh_pass)])
        table("pareto.csv", ["bin_lower", "bin_upper", "count", "cumulative_pct"],
              [[_f(b.lower), _f(b.upper), b.count, _f(b.cumulative_pct)] for b in self.pareto])
        table("volumes.csv", ["interval_start_s", "real", "simulated"],
              [[t, int(a), int(b)] for t, a, b in zip(
                  self.interval_starts, self.volume_real, self.volume_sim)])
        return written


def _f(x: float) -> str:
    return "nan" if x != x else f"{x:.6g}"


def metric_report(real: CountSeries, simulated: CountSeries, sensor_ids: Sequence[str],
                  interval_starts: Sequence[int], pareto_width: float = 5.0) -> MetricReport:
    ids = list(sensor_ids)
    return MetricReport(ids, list(interval_starts), real.subset(ids).values,
                        simulated.subset(ids).values, pareto_width=pareto_width)
