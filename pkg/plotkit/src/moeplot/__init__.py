"""Render comparison CSVs from the simulator as normalized bar charts.

This package reads only the delimited comparison output; it never imports
the simulator itself, so either side can change internals freely as long
as the CSV columns stay put.
"""

from .plot import PlotError, PlotSpec, load_rows, normalize, render

__all__ = ["PlotError", "PlotSpec", "load_rows", "normalize", "render"]
