"""Bayesian nowcasting of delay-censored county case counts."""

__version__ = "0.1.0"

from .data import (
    AnalysisWindow,
    CountyGraph,
    LineListRecord,
    ReportingTriangle,
    build_triangle,
    day_of_week_design,
    load_graph,
    partial_totals,
    rook_grid,
)
from .indicators import IndicatorResult, rolling_indicator, spline_indicator

__all__ = [
    "AnalysisWindow",
    "CountyGraph",
    "IndicatorResult",
    "LineListRecord",
    "ReportingTriangle",
    "build_triangle",
    "day_of_week_design",
    "load_graph",
    "partial_totals",
    "rolling_indicator",
    "rook_grid",
    "spline_indicator",
]
