"""Figure rendering for treebandit regret CSVs.

Consumes the aggregate CSV written by `treebandit run` (columns t, depth,
then mean/std pairs per metric) and draws, per depth, the mean cumulative
regret with a +-1 std band plus a dotted t^(1 - 1/(2 d^2)) reference line.
Reference lines are normalized to touch the empirical curve at the anchor
checkpoint (the final one by default). Rendering is a pure function of the
CSV contents.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXPECTED_COLUMNS = (
    "t", "depth",
    "regret_total_mean", "regret_total_std",
    "regret_action_mean", "regret_action_std",
    "regret_payment_mean", "regret_payment_std",
    "regret_deviation_mean", "regret_deviation_std",
    "welfare_regret_mean", "welfare_regret_std",
    "w1_mean", "w1_std",
)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PlotSpec:
    inputs: tuple[Path, ...]  # aggregate CSV paths (or directories holding one)
    output: Path
    depths: tuple[int, ...] | None = None  # None: every depth in the data
    loglog: bool = False
    anchor_t: int | None = None  # reference normalization point; None: final checkpoint
    metric: str = "regret_total"


@dataclass
class DepthSeries:
    depth: int
    t: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    reference: np.ndarray = field(default=None)


def _resolve(path: Path) -> Path:
    path = Path(path)
    if path.is_dir():
        candidate = path / "aggregate.csv"
        if not candidate.exists():
            raise SchemaError(f"{path}: no aggregate.csv in directory")
        return candidate
    return path


def load_aggregate(path: Path) -> list[dict]:
    path = _resolve(path)
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        missing = [c for c in EXPECTED_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; got {list(header)}")
        extra = [c for c in header if c not in EXPECTED_COLUMNS]
        if extra:
            raise SchemaError(f"{path}: unexpected column(s) {extra}")
        return list(reader)


def extract_series(spec: PlotSpec) -> list[DepthSeries]:
    """Per-depth mean/std/reference series, merged over all input files."""
    rows: list[dict] = []
    for path in spec.inputs:
        rows.extend(load_aggregate(path))
    by_depth: dict[int, dict[int, list[tuple[float, float]]]] = {}
    for row in rows:
        d = int(row["depth"])
        by_depth.setdefault(d, {}).setdefault(int(row["t"]), []).append(
            (float(row[f"{spec.metric}_mean"]), float(row[f"{spec.metric}_std"]))
        )
    depths = spec.depths if spec.depths is not None else tuple(sorted(by_depth))
    missing = [d for d in depths if d not in by_depth]
    if missing:
        raise SchemaError(f"depth(s) {missing} not present in the data (have {sorted(by_depth)})")

    out = []
    for d in depths:
        ts = np.array(sorted(by_depth[d]))
        mean = np.array([np.mean([m for m, _ in by_depth[d][t]]) for t in ts])
        std = np.array([np.mean([s for _, s in by_depth[d][t]]) for t in ts])
        exponent = 1.0 - 1.0 / (2.0 * d * d)
        raw = ts.astype(float) ** exponent
        anchor = spec.anchor_t if spec.anchor_t is not None else int(ts[-1])
        idx = int(np.searchsorted(ts, anchor))
        idx = min(idx, len(ts) - 1)
        scale = mean[idx] / raw[idx] if raw[idx] > 0 else 1.0
        out.append(DepthSeries(depth=d, t=ts, mean=mean, std=std, reference=raw * scale))
    return out


def fit_tail_slope(series: DepthSeries) -> float:
    """Least-squares log-log slope over the final decade of the curve."""
    lo = series.t[-1] / 10
    mask = (series.t >= lo) & (series.mean > 0)
    if mask.sum() < 2:
        return float("nan")
    coeffs = np.polyfit(np.log(series.t[mask]), np.log(series.mean[mask]), 1)
    return float(coeffs[0])


def render(spec: PlotSpec) -> dict:
    """Write the figure; returns the extracted series and the root tail slope."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    all_series = extract_series(spec)
    root = max(all_series, key=lambda s: s.depth)
    slope = fit_tail_slope(root)

    fig, ax = plt.subplots(figsize=(7.0, 4.6))
    for s in all_series:
        (line,) = ax.plot(s.t, s.mean, "-", label=f"depth {s.depth}")
        ax.fill_between(s.t, s.mean - s.std, s.mean + s.std,
                        color=line.get_color(), alpha=0.2, linewidth=0)
        ax.plot(s.t, s.reference, ":", color=line.get_color(),
                label=f"$t^{{1 - 1/(2 \\cdot {s.depth}^2)}}$")
    if spec.loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.set_ylabel(f"cumulative {spec.metric.replace('_', ' ')}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    spec.output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output)
    plt.close(fig)

    return {
        "series": all_series,
        "root_tail_slope": slope,
        "output": spec.output,
    }
