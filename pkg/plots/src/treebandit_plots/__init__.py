"""Cumulative-regret figures from treebandit experiment CSVs."""

__version__ = "0.1.0"

from .render import (  # noqa: F401
    DepthSeries,
    EXPECTED_COLUMNS,
    PlotSpec,
    SchemaError,
    extract_series,
    fit_tail_slope,
    load_aggregate,
    render,
)
