"""Experiment orchestration: config loading, multi-seed batches, CSV output.

Subcommands:

- ``run``          simulate every seed in the config and write per-seed CSVs,
                   an aggregate CSV grouped by depth, and run metadata
- ``oracle``       print the hindsight solution and the welfare identity check
- ``search-demo``  batched binary search against an exact best responder
- ``reference``    the t^(1 - 1/(2 d^2)) reference series on the logging grid

Exit codes: 0 success, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .engine import EngineError, checkpoint_grid, horizon_guardrail, run_game
from .environment import Environment, NoiseModel, build_tree, sample_environment, stream
from .oracle import brute_force_welfare, healthy_margins, reward_gaps, solve_tree
from .policies import ConstantMode, ExactBestResponder, run_search

log = logging.getLogger("treebandit")

SEED_COLUMNS = (
    "t", "player_id", "depth",
    "regret_total", "regret_action", "regret_payment", "regret_deviation",
    "welfare_regret", "w1",
)
_METRICS = ("regret_total", "regret_action", "regret_payment", "regret_deviation", "welfare_regret", "w1")
AGGREGATE_COLUMNS = ("t", "depth") + tuple(
    f"{m}_{s}" for m in _METRICS for s in ("mean", "std")
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    depth: int
    breadth: int
    arms: int
    horizon: int
    noise: NoiseModel
    seeds: tuple[int, ...]
    mode: ConstantMode
    dense_until: int = 1000
    n_checkpoints: int = 100
    shared_environment: bool = False
    output_dir: str = "out"
    min_gap: float = 0.0

    def to_dict(self) -> dict:
        cfg = {
            "tree": {"depth": self.depth, "breadth": self.breadth},
            "arms": self.arms,
            "horizon": self.horizon,
            "noise": self.noise.to_dict(),
            "seeds": list(self.seeds),
            "constants": {"mode": self.mode.kind, "c_scale": self.mode.c_scale},
            "logging": {"dense_until": self.dense_until, "checkpoints": self.n_checkpoints},
            "shared_environment": self.shared_environment,
            "output_dir": self.output_dir,
            "min_gap": self.min_gap,
        }
        return cfg


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _check_keys(section: dict, path: str, allowed: set[str]):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config dict; unknown keys anywhere are errors."""
    _check_keys(raw, "config", {
        "tree", "arms", "horizon", "noise", "seeds", "constants", "logging",
        "shared_environment", "output_dir", "min_gap",
    })
    for key in ("tree", "arms", "horizon", "seeds"):
        _require(key in raw, f"config.{key}", "required field is missing")

    tree = raw["tree"]
    _require(isinstance(tree, dict), "tree", "expected an object with depth and breadth")
    _check_keys(tree, "tree", {"depth", "breadth"})
    depth, breadth = tree.get("depth"), tree.get("breadth")
    _require(isinstance(depth, int) and depth >= 1, "tree.depth", "expected integer >= 1")
    _require(isinstance(breadth, int) and breadth >= 1, "tree.breadth", "expected integer >= 1")

    arms = raw["arms"]
    _require(isinstance(arms, int) and arms >= 2, "arms", "expected integer >= 2")
    horizon = raw["horizon"]
    _require(isinstance(horizon, int) and horizon >= 1, "horizon", "expected integer >= 1")

    noise_raw = raw.get("noise", {"kind": "gaussian", "sigma": 0.1})
    _require(isinstance(noise_raw, dict), "noise", "expected an object")
    _check_keys(noise_raw, "noise", {"kind", "sigma", "scale"})
    try:
        noise = NoiseModel.from_dict(noise_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"noise: {exc}") from exc

    seeds = raw["seeds"]
    _require(isinstance(seeds, list) and seeds, "seeds", "expected a nonempty list of integers")
    _require(all(isinstance(s, int) for s in seeds), "seeds", "expected a nonempty list of integers")

    constants = raw.get("constants", {"mode": "theoretical"})
    _check_keys(constants, "constants", {"mode", "c_scale"})
    kind = constants.get("mode", "theoretical")
    _require(kind in ("theoretical", "scaled"), "constants.mode", "expected 'theoretical' or 'scaled'")
    c_scale = constants.get("c_scale", 0.05)
    _require(isinstance(c_scale, (int, float)) and c_scale > 0, "constants.c_scale", "expected a number > 0")
    mode = ConstantMode(kind=kind, c_scale=float(c_scale))

    logging_raw = raw.get("logging", {})
    _check_keys(logging_raw, "logging", {"dense_until", "checkpoints"})
    dense_until = logging_raw.get("dense_until", 1000)
    n_checkpoints = logging_raw.get("checkpoints", 100)
    _require(isinstance(dense_until, int) and dense_until >= 1, "logging.dense_until", "expected integer >= 1")
    _require(isinstance(n_checkpoints, int) and n_checkpoints >= 2, "logging.checkpoints", "expected integer >= 2")

    shared = raw.get("shared_environment", False)
    _require(isinstance(shared, bool), "shared_environment", "expected true or false")
    out_dir = raw.get("output_dir", "out")
    _require(isinstance(out_dir, str) and out_dir, "output_dir", "expected a nonempty string")
    min_gap = raw.get("min_gap", 0.0)
    _require(isinstance(min_gap, (int, float)) and 0.0 <= min_gap < 1.0, "min_gap",
             "expected a number in [0, 1)")

    return ExperimentConfig(
        depth=depth, breadth=breadth, arms=arms, horizon=horizon, noise=noise,
        seeds=tuple(seeds), mode=mode, dense_until=dense_until,
        n_checkpoints=n_checkpoints, shared_environment=shared, output_dir=out_dir,
        min_gap=float(min_gap),
    )


def load_config(source: str) -> ExperimentConfig:
    """Load from a JSON file path or a shipped preset name (``desk``, ``paper-fig2``)."""
    preset = source.replace("_", "-")
    if preset in ("desk", "paper-fig2"):
        text = resources.files("treebandit.presets").joinpath(f"{preset.replace('-', '_')}.json").read_text()
        return parse_config(json.loads(text))
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config: no such file or preset: {source}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON in {source}: {exc}") from exc
    return parse_config(raw)


def build_environment(config: ExperimentConfig, seed: int) -> tuple[Environment, int]:
    """Instance for one seed; with min_gap set, resamples until margins are healthy.

    Near-tied equilibria cannot be separated within a finite horizon, so
    desk-scale presets screen instances on the oracle's margin report. The
    attempt counter feeds the theta stream and is returned for the metadata.
    """
    tree = build_tree(config.depth, config.breadth)
    attempts = 0
    while True:
        env = sample_environment(tree, config.arms, stream(seed, attempts, "theta"),
                                 noise=config.noise, seed=seed)
        if config.min_gap <= 0.0 or healthy_margins(solve_tree(env), config.min_gap):
            return env, attempts
        attempts += 1
        if attempts > 10000:
            raise ConfigError(f"min_gap: no instance with margins >= {config.min_gap} "
                              f"found for seed {seed} after 10000 attempts")


def _checkpoints(config: ExperimentConfig) -> np.ndarray:
    T = config.horizon
    return checkpoint_grid(T, config.dense_until, config.n_checkpoints, include=(T // 4, T // 2))


def _run_seed(args: tuple[dict, int]) -> dict:
    raw, seed = args
    config = parse_config(raw)
    env_seed = config.seeds[0] if config.shared_environment else seed
    env, attempts = build_environment(config, env_seed)
    result = run_game(
        env, config.horizon, config.mode, master_seed=seed, checkpoints=_checkpoints(config),
    )
    return {
        "seed": seed,
        "env_attempts": attempts,
        "checkpoints": result.checkpoints,
        "total": result.total,
        "action": result.action,
        "payment": result.payment,
        "deviation": result.deviation,
        "w1": result.w1,
        "welfare": result.welfare,
        "metadata": result.metadata,
    }


def _fmt(x) -> str:
    return repr(float(x))


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        # mkstemp creates 0600; give outputs ordinary umask-governed permissions
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _seed_csv(run: dict, depths: list[int]) -> str:
    lines = [",".join(SEED_COLUMNS)]
    n = len(depths)
    for i, t in enumerate(run["checkpoints"]):
        for v in range(n):
            lines.append(
                f"{t},{v},{depths[v]},"
                f"{_fmt(run['total'][i, v])},{_fmt(run['action'][i, v])},"
                f"{_fmt(run['payment'][i, v])},{_fmt(run['deviation'][i, v])},"
                f"{_fmt(run['welfare'][i])},{_fmt(run['w1'][i, v])}"
            )
    return "\n".join(lines) + "\n"


def _aggregate_csv(runs: list[dict], depths: list[int]) -> str:
    """Mean/std across seeds of depth-level series (node values averaged per depth)."""
    by_depth: dict[int, list[int]] = {}
    for v, d in enumerate(depths):
        by_depth.setdefault(d, []).append(v)
    cps = runs[0]["checkpoints"]
    lines = [",".join(AGGREGATE_COLUMNS)]
    for i, t in enumerate(cps):
        for d in sorted(by_depth):
            nodes = by_depth[d]
            cells = [str(t), str(d)]
            for metric in _METRICS:
                if metric == "welfare_regret":
                    vals = np.array([run["welfare"][i] for run in runs])
                else:
                    key = {"regret_total": "total", "regret_action": "action",
                           "regret_payment": "payment", "regret_deviation": "deviation",
                           "w1": "w1"}[metric]
                    vals = np.array([run[key][i][nodes].mean() for run in runs])
                cells.append(_fmt(vals.mean()))
                cells.append(_fmt(vals.std()))
            lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig, out_dir: str | None = None, workers: int = 1) -> dict:
    """Run every seed, write CSVs and metadata; returns the written paths."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output_dir: not writable: {exc}") from exc

    raw = config.to_dict()
    log.info("running %d seed(s) into %s", len(config.seeds), out)
    jobs = [(raw, seed) for seed in config.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_seed, jobs))
    else:
        runs = [_run_seed(job) for job in jobs]
    runs.sort(key=lambda r: config.seeds.index(r["seed"]))

    depths = [runs[0]["metadata"]["depths"][v] for v in sorted(runs[0]["metadata"]["depths"])]
    paths = {"seeds": [], "aggregate": out / "aggregate.csv", "metadata": out / "run_metadata.json"}
    for run in runs:
        path = out / f"seed_{run['seed']}.csv"
        _atomic_write(path, _seed_csv(run, depths))
        paths["seeds"].append(path)
    _atomic_write(paths["aggregate"], _aggregate_csv(runs, depths))

    meta = {
        "version": __version__,
        "config": raw,
        "guardrail_horizon_large_enough": horizon_guardrail(
            build_environment(config, config.seeds[0])[0], config.horizon
        ),
        "environment_attempts": {run["seed"]: run["env_attempts"] for run in runs},
        "schedules": runs[0]["metadata"]["schedules"],
        "phase_schedule": runs[0]["metadata"]["phase_schedule"],
        "assumption_params": runs[0]["metadata"]["assumption_params"],
        "columns": {"per_seed": list(SEED_COLUMNS), "aggregate": list(AGGREGATE_COLUMNS)},
    }
    _atomic_write(paths["metadata"], json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return paths


def reference_curve(depth: int, horizon: int, points: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """The dominant regret-rate series t^(1 - 1/(2 d^2)) on a geometric grid."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    ts = np.unique(np.round(np.geomspace(1, horizon, num=points)).astype(np.int64))
    exponent = 1.0 - 1.0 / (2.0 * depth * depth)
    return ts, ts.astype(float) ** exponent


def search_demo_report(
    tau_values: list[float], horizon: int, alpha: float, beta: float, eta: float,
    c: float, kappa: float, breadth: int,
) -> list[dict]:
    """Run the payment search against exact best responders; one report per target."""
    reports = []
    for tau in tau_values:
        child = ExactBestResponder(values=np.array([1.0, 1.0 - tau]))
        rep = run_search(child, arm=1, horizon=horizon, alpha=alpha, beta=beta,
                         eta=eta, c=c, kappa=kappa, breadth=breadth)
        margin = 4.0 * horizon ** (-beta) + c * breadth * horizon ** (-eta)
        ok = (rep.estimate - margin <= tau <= rep.estimate) and rep.low <= tau <= rep.high
        reports.append({"tau": tau, "report": rep, "sandwich_ok": ok, "margin": margin})
    return reports


def _cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds: expected integer >= 1")
        config = ExperimentConfig(**{**config.__dict__, "seeds": tuple(range(args.seeds))})
    paths = run_experiment(config, out_dir=args.out, workers=args.workers)
    print(f"wrote {len(paths['seeds'])} seed file(s), {paths['aggregate']}, {paths['metadata']}")
    return 0


def _cmd_oracle(args) -> int:
    config = load_config(args.config)
    env, _ = build_environment(config, config.seeds[0])
    sol = solve_tree(env)
    print(f"welfare optimum: {sol.welfare!r}")
    print(f"welfare profile (hindsight): {list(sol.welfare_profile)}")
    for v in range(env.n_nodes):
        entry = sol.profile[v]
        print(
            f"node {v} (depth {env.tree.nodes[v].depth}): action {entry.action}, "
            f"recommendations {list(entry.recommendations)}, transfers {[round(x, 6) for x in entry.transfers]}, "
            f"best values {[round(float(x), 6) for x in sol.best[v]]}"
        )
    for gap in reward_gaps(sol):
        print(f"node {gap.node}: argmax singleton {gap.argmax_singleton}, "
              f"recommendation gap {gap.recommendation_gap}, reward gap {gap.reward_gap:.6f}")
    if env.arms ** env.n_nodes <= 10**6:
        profile, value = brute_force_welfare(env)
        gap = abs(value - sol.welfare)
        print(f"identity check: brute-force welfare {value!r}, |difference| = {gap:.3e}")
        if gap > 1e-9:
            print("identity check FAILED")
            return 3
    else:
        print("identity check skipped: instance above enumeration cap")
    if args.export:
        sol.to_json(args.export)
        print(f"solution written to {args.export}")
    return 0


def _cmd_search_demo(args) -> int:
    if (args.tau_star is None) == (args.random is None):
        raise ConfigError("search-demo: pass exactly one of --tau-star or --random")
    if args.tau_star is not None:
        taus = [args.tau_star]
        if not 0.0 <= args.tau_star <= 1.0:
            raise ConfigError("--tau-star: expected a value in [0, 1]")
    else:
        taus = stream(args.seed, 0, "policy").uniform(0.0, 1.0, size=args.random).tolist()
    reports = search_demo_report(
        taus, args.horizon, args.alpha, args.beta, args.eta, args.c, args.kappa, args.breadth
    )
    all_ok = True
    for item in reports:
        rep = item["report"]
        print(f"target payment {item['tau']:.6f} (t_exp={rep.t_exp}, batches={rep.n_batches})")
        for row in rep.rows:
            print(
                f"  batch {row.batch}: low={row.low:.6f} mid={row.mid:.6f} high={row.high:.6f} "
                f"refusals={row.refusals} -> {row.outcome}"
            )
        verdict = "PASS" if item["sandwich_ok"] else "FAIL"
        print(f"  estimate {rep.estimate:.6f}, width {rep.high - rep.low:.6f}, "
              f"margin {item['margin']:.6f}, sandwich {verdict}")
        all_ok &= item["sandwich_ok"]
    return 0 if all_ok else 3


def _cmd_reference(args) -> int:
    ts, values = reference_curve(args.depth, args.horizon, args.points)
    print("t,value")
    for t, value in zip(ts, values):
        print(f"{t},{value!r}")
    return 0


def main(argv=None) -> int:
    level = os.environ.get("TREEBANDIT_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))

    parser = argparse.ArgumentParser(prog="treebandit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a multi-seed experiment")
    p_run.add_argument("--config", required=True, help="config JSON path or preset name (desk, paper-fig2)")
    p_run.add_argument("--seeds", type=int, default=None, help="override: use seeds 0..N-1")
    p_run.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p_run.add_argument("--workers", type=int, default=1, help="seed-level parallelism")
    p_run.set_defaults(func=_cmd_run)

    p_oracle = sub.add_parser("oracle", help="print the hindsight solution and identity check")
    p_oracle.add_argument("--config", required=True)
    p_oracle.add_argument("--export", default=None, help="also write the solution as JSON")
    p_oracle.set_defaults(func=_cmd_oracle)

    p_demo = sub.add_parser("search-demo", help="payment search against an exact best responder")
    p_demo.add_argument("--tau-star", type=float, default=None)
    p_demo.add_argument("--random", type=int, default=None, help="number of random targets")
    p_demo.add_argument("--seed", type=int, default=0)
    p_demo.add_argument("--horizon", type=int, default=10**6)
    p_demo.add_argument("--alpha", type=float, default=2.0 / 3.0)
    p_demo.add_argument("--beta", type=float, default=0.25)
    p_demo.add_argument("--eta", type=float, default=0.25)
    p_demo.add_argument("--c", type=float, default=1.0)
    p_demo.add_argument("--kappa", type=float, default=0.5)
    p_demo.add_argument("--breadth", type=int, default=1)
    p_demo.set_defaults(func=_cmd_search_demo)

    p_ref = sub.add_parser("reference", help="dominant-rate reference series")
    p_ref.add_argument("--depth", type=int, required=True)
    p_ref.add_argument("--horizon", type=int, required=True)
    p_ref.add_argument("--points", type=int, default=100)
    p_ref.set_defaults(func=_cmd_reference)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (EngineError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
