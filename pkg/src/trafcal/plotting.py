"""PNG renderings of calibration histories and metric reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import MetricReport

STYLE = {"figsize": (6.0, 3.6), "dpi": 110}


def _figure():
    fig = Figure(figsize=STYLE["figsize"], dpi=STYLE["dpi"])
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # no timestamp or version chunk so reruns leave identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def plot_convergence(objectives: Sequence[float], path: str | Path,
                     label: str = "objective") -> Path:
    """Objective per iteration (0 = initial model) with its running best."""
    fig, ax = _figure()
    obj = np.asarray(objectives, dtype=float)
    it = np.arange(obj.size)
    ax.plot(it, obj, "o-", ms=3, lw=1, label=label)
    ax.plot(it, np.minimum.accumulate(obj), "k--", lw=1, label="best so far")
    ax.set_xlabel("iteration")
    ax.set_ylabel("sum |y - y_hat|")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def plot_volumes(report: MetricReport, path: str | Path) -> Path:
    fig, ax = _figure()
    t = np.asarray(report.interval_starts) / 3600.0
    ax.plot(t, report.volume_real, "o-", ms=3, label="real")
    ax.plot(t, report.volume_sim, "s--", ms=3, label="simulated")
    ax.set_xlabel("interval start [h]")
    ax.set_ylabel("vehicles counted")
    ax.legend(frameon=False)
    return _save(fig, Path(path))


def plot_geh_pass(report: MetricReport, path: str | Path) -> Path:
    fig, ax = _figure()
    t = np.asarray(report.interval_starts) / 3600.0
    width = (t[1] - t[0]) * 0.8 if t.size > 1 else 0.2
    ax.bar(t, 100.0 * report.geh_pass, width=width, align="edge", color="tab:green")
    ax.axhline(85.0, color="k", lw=0.8, ls=":")
    ax.set_ylim(0, 100)
    ax.set_xlabel("interval start [h]")
    ax.set_ylabel("sensors with GEH < 5 [%]")
    return _save(fig, Path(path))


def plot_pareto(report: MetricReport, path: str | Path) -> Path:
    fig, ax = _figure()
    bins = report.pareto
    x = np.arange(len(bins))
    ax.bar(x, [b.count for b in bins], color="tab:blue")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{b.lower:g}-{b.upper:g}" for b in bins], rotation=45, fontsize=8)
    ax.set_xlabel("per-sensor MAE bin")
    ax.set_ylabel("sensors")
    ax2 = ax.twinx()
    ax2.plot(x, [b.cumulative_pct for b in bins], "r.-")
    ax2.set_ylim(0, 105)
    ax2.set_ylabel("cumulative [%]")
    return _save(fig, Path(path))


def render_report(report: MetricReport, out: str | Path) -> list[Path]:
    """Write the standard figure set next to the report CSVs in ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return [plot_volumes(report, out / "volumes.png"),
            plot_geh_pass(report, out / "geh_pass.png"),
            plot_pareto(report, out / "pareto.png")]
