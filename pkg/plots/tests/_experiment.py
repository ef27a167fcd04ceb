"""Shared helper: produce experiment CSVs through the treebandit CLI.

The plots package consumes only the primary package's external interface,
so tests generate their inputs by invoking `treebandit run` as a
subprocess with this fixed desk-shaped configuration.
"""

import json
import subprocess
import sys
from pathlib import Path

DESK_LIKE_CONFIG = {
    "tree": {"depth": 3, "breadth": 2},
    "arms": 3,
    "horizon": 20000,
    "noise": {"kind": "gaussian", "sigma": 0.1},
    "seeds": [0, 1],
    "constants": {"mode": "scaled", "c_scale": 0.05},
    "logging": {"dense_until": 50, "checkpoints": 40},
    "shared_environment": False,
    "output_dir": "unused",
    "min_gap": 0.1,
}


def run_experiment_cli(out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(DESK_LIKE_CONFIG))
    result = subprocess.run(
        [sys.executable, "-m", "treebandit.cli", "run",
         "--config", str(config_path), "--out", str(out_dir), "--workers", "1"],
        capture_output=True, text=True,
    )
    if result.returncode != 0:
        raise RuntimeError(f"treebandit run failed: {result.stderr}")
    return out_dir
