"""Regenerate golden/series.json from a fresh CLI run (deterministic)."""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from _experiment import run_experiment_cli
from treebandit_plots import PlotSpec, extract_series, fit_tail_slope


def extract_payload(exp_dir: Path) -> dict:
    spec = PlotSpec(inputs=(exp_dir,), output=exp_dir / "fig.pdf")
    series = extract_series(spec)
    return {
        "series": {
            str(s.depth): {
                "t": s.t.tolist(),
                "mean": s.mean.tolist(),
                "std": s.std.tolist(),
                "reference": s.reference.tolist(),
            }
            for s in series
        },
        "root_tail_slope": fit_tail_slope(max(series, key=lambda s: s.depth)),
    }


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        exp = run_experiment_cli(Path(tmp))
        payload = extract_payload(exp)
    target = Path(__file__).parent / "golden" / "series.json"
    target.write_text(json.dumps(payload, indent=1) + "\n")
    print(f"wrote {target}")
