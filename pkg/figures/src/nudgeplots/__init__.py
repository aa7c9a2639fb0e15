"""Semilog error-history figures from twin-experiment CSV files.

Reads the `errors.csv` / `combined.csv` tables written by the flow solver
and renders comparison plots: one curve per run or per sweep value on a
logarithmic error axis with the machine-precision floor marked.  Output is
vector (SVG/PDF) by default and byte-reproducible.
"""

__version__ = "0.1.0"

from .plots import PlotSpec, PlotData, plot_error_histories, plot_sweep  # noqa: F401
