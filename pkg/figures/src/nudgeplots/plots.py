"""Figure construction from delimited error histories."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

MACHINE_FLOOR = 1e-13

# byte-reproducible vector output: fixed hash salt, no timestamps
matplotlib.rcParams["svg.hashsalt"] = "nudgeplots"


class PlotInputError(ValueError):
    pass


@dataclass
class PlotSpec:
    """What to draw: input tables, labels, scales, and the output file."""

    csv_paths: list
    labels: list | None = None
    log_y: bool = True
    floor: float = MACHINE_FLOOR
    output: str = "errors.svg"
    title: str = ""
    column: str = "rel_l2_error"

    def __post_init__(self):
        self.csv_paths = [Path(p) for p in self.csv_paths]
        if not self.csv_paths:
            raise PlotInputError("no input CSV files given")
        if self.labels is None:
            self.labels = [p.stem for p in self.csv_paths]
        if len(self.labels) != len(self.csv_paths):
            raise PlotInputError("labels and csv_paths differ in length")


@dataclass
class PlotData:
    """Curves exactly as drawn, for downstream checks without pixel reads."""

    path: Path
    times: np.ndarray
    curves: dict = field(default_factory=dict)

    def final_values(self) -> dict:
        return {k: v[-1] for k, v in self.curves.items()}

    def slope_decades_per_time(self, label: str) -> float:
        """Least-squares slope of log10(curve) over the drawn window."""
        v = self.curves[label]
        keep = v > MACHINE_FLOOR
        t, y = self.times[keep], np.log10(v[keep])
        a = np.vstack([t, np.ones_like(t)]).T
        sol, *_ = np.linalg.lstsq(a, y, rcond=None)
        return float(sol[0])


def _read_table(path: Path) -> tuple[list, np.ndarray]:
    if not path.exists():
        raise PlotInputError(f"input file {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


def _column(header: list, data: np.ndarray, name: str, path) -> np.ndarray:
    if name not in header:
        raise PlotInputError(f"column {name!r} missing from {path}")
    return data[:, header.index(name)]


def _save(fig, output: Path) -> None:
    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, metadata={"Date": None} if output.suffix == ".svg" else None)
    plt.close(fig)


def _style_axes(ax, spec: PlotSpec, tmax: float):
    if spec.log_y:
        ax.set_yscale("log")
    if spec.floor and spec.floor > 0:
        ax.axhline(spec.floor, color="0.4", linestyle="--", linewidth=0.8,
                   label="machine precision")
    ax.set_xlabel("t")
    ax.set_ylabel("relative $L^2$ error")
    ax.set_xlim(0.0, tmax)
    if spec.title:
        ax.set_title(spec.title)
    ax.grid(True, which="both", alpha=0.25)
    ax.legend(loc="best", fontsize=9)


def plot_error_histories(spec: PlotSpec) -> PlotData:
    """One curve per input CSV on a common time grid.

    Inputs not sharing the first file's time column are linearly
    interpolated onto it.
    """
    base_header, base = _read_table(spec.csv_paths[0])
    t0 = _column(base_header, base, "t", spec.csv_paths[0])
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    data = PlotData(Path(spec.output), t0)
    for path, label in zip(spec.csv_paths, spec.labels):
        header, table = _read_table(path)
        t = _column(header, table, "t", path)
        e = _column(header, table, spec.column, path)
        if len(t) != len(t0) or not np.array_equal(t, t0):
            e = np.interp(t0, t, e)
        shown = np.maximum(e, spec.floor / 10) if spec.log_y else e
        ax.plot(t0, shown, label=label, linewidth=1.4)
        data.curves[label] = e
    _style_axes(ax, spec, float(t0[-1]))
    _save(fig, Path(spec.output))
    return data


def plot_sweep(combined_csv, output, axis_label: str = "", title: str = "",
               log_y: bool = True, floor: float = MACHINE_FLOOR) -> PlotData:
    """One curve per value column of a sweep's combined table."""
    path = Path(combined_csv)
    header, table = _read_table(path)
    if header[0] != "t":
        raise PlotInputError(f"{path} is not a combined sweep table")
    value_cols = header[1:]
    if not value_cols:
        raise PlotInputError("combined table has no sweep columns")
    t = table[:, 0]
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    data = PlotData(Path(output), t)
    for k, name in enumerate(value_cols, start=1):
        e = table[:, k]
        label = f"{axis_label}{name}" if axis_label else name
        shown = np.maximum(e, floor / 10) if log_y else e
        ax.plot(t, shown, label=label, linewidth=1.4)
        data.curves[name] = e
    spec = PlotSpec([path], labels=[""], log_y=log_y, floor=floor,
                    output=str(output), title=title)
    _style_axes(ax, spec, float(t[-1]))
    _save(fig, Path(output))
    return data
