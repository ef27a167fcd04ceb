"""The repeated game: top-down decision pass, reward realization, settlement,
and instrumentation against the hindsight solution.

Each round, decisions propagate root-first (a node sees its parent's
contract before deciding), rewards are drawn once all actions are fixed,
transfers settle exactly, and four cumulative regret series plus welfare
and transport-distance accumulators are updated per node.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import __version__
from .environment import Environment, stream
from .oracle import OracleSolution, solve_tree
from .policies import (
    ConstantMode,
    Contract,
    PlayerState,
    THEORETICAL,
    build_players,
)

CONSERVATION_TOL = 1e-12
DECOMPOSITION_TOL = 1e-9


class EngineError(RuntimeError):
    pass


@dataclass
class RoundRecord:
    """Everything that happened in one round, per node.

    `contracts_out[v]` is aligned with the node's child order; `complied[v]`
    says whether v played its own parent's recommendation (True for the root).
    """

    t: int
    contract_in: list[Contract | None]
    action: np.ndarray
    contracts_out: list[tuple[Contract, ...]]
    complied: np.ndarray
    reward: np.ndarray
    utility: np.ndarray


@dataclass
class RegretLedger:
    """Cumulative per-node regret series plus welfare and W1 accumulators.

    `total` follows the contract-aware regret and may decrease when a player
    over-earns a round; the three components use positive parts and are
    nondecreasing. ``dist_sum / rounds`` is the per-node W1 distance between
    the empirical play and the equilibrium profile.
    """

    n_nodes: int
    total: np.ndarray = None
    action: np.ndarray = None
    payment: np.ndarray = None
    deviation: np.ndarray = None
    dist_sum: np.ndarray = None
    welfare: float = 0.0
    rounds: int = 0

    def __post_init__(self):
        for name in ("total", "action", "payment", "deviation", "dist_sum"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n_nodes))

    def w1(self) -> np.ndarray:
        return self.dist_sum / max(self.rounds, 1)

    def decomposition_slack(self) -> np.ndarray:
        """action + payment + deviation - total; nonnegative up to float error."""
        return self.action + self.payment + self.deviation - self.total


class _NodeCtx:
    """Per-node constants for the hot loop: flat tables, strides, hindsight values."""

    __slots__ = (
        "children", "m", "theta", "best", "max_best", "net", "tau_child",
        "star_action", "star_recs", "star_taus",
    )

    def __init__(self, sol: OracleSolution, v: int):
        env = sol.env
        node = env.tree.nodes[v]
        self.children = node.children
        self.m = len(node.children)
        self.theta = env.means[v].reshape(-1).tolist()
        self.net = np.asarray(sol.net[v]).reshape(-1).tolist()
        self.best = [float(x) for x in sol.best[v]]
        self.max_best = max(self.best)
        self.tau_child = [sol.transfers[w].tolist() for w in node.children]
        entry = sol.profile[v]
        self.star_action = entry.action
        self.star_recs = entry.recommendations
        self.star_taus = entry.transfers

    def flat(self, own: int, rest) -> int:
        idx = own
        for a in rest:
            idx = idx * len(self.best) + a
        return idx


_CTX_CACHE: dict[int, tuple[OracleSolution, list[_NodeCtx]]] = {}


def _contexts(sol: OracleSolution) -> list[_NodeCtx]:
    cached = _CTX_CACHE.get(id(sol))
    if cached is not None and cached[0] is sol:
        return cached[1]
    ctxs = [_NodeCtx(sol, v) for v in range(sol.env.n_nodes)]
    if len(_CTX_CACHE) > 8:
        _CTX_CACHE.clear()
    _CTX_CACHE[id(sol)] = (sol, ctxs)
    return ctxs


def _node_regret(
    ctx: _NodeCtx,
    c_in: Contract | None,
    action: int,
    flat_played: int,
    contracts: tuple[Contract, ...],
    child_actions: tuple[int, ...],
    own_complied: bool,
) -> tuple[float, float, float, float]:
    """(total, action, payment, deviation) regret increments for one node-round."""
    theta_played = ctx.theta[flat_played]
    if c_in is not None:
        top = ctx.best[c_in.arm] + c_in.transfer
        if top < ctx.max_best:
            top = ctx.max_best
        own_bonus = c_in.transfer if own_complied else 0.0
        act_bonus = c_in.transfer if action == c_in.arm else 0.0
    else:
        top = ctx.max_best
        own_bonus = 0.0
        act_bonus = 0.0

    if ctx.m == 0:
        total = top - (theta_played + own_bonus)
        action_term = top - (theta_played + act_bonus)
        return total, action_term, 0.0, 0.0

    paid = 0.0
    payment = 0.0
    flat_rec = action
    K = len(ctx.best)
    for i in range(ctx.m):
        rec, transfer = contracts[i]
        flat_rec = flat_rec * K + rec
        if child_actions[i] == rec:
            paid += transfer
        over = transfer - ctx.tau_child[i][rec]
        if over > 0.0:
            payment += over
    theta_rec = ctx.theta[flat_rec]
    total = top - (theta_played + own_bonus - paid)
    action_term = top - (ctx.net[flat_rec] + act_bonus)
    deviation = theta_rec - theta_played
    if deviation < 0.0:
        deviation = 0.0
    return total, action_term, payment, deviation


def _node_dist(ctx: _NodeCtx, action: int, contracts: tuple[Contract, ...]) -> float:
    """Transport distance between the played profile and the equilibrium one."""
    dist = 0.0 if action == ctx.star_action else 1.0
    for i in range(ctx.m):
        rec, transfer = contracts[i]
        if rec != ctx.star_recs[i]:
            dist += 1.0
        else:
            diff = transfer - ctx.star_taus[i]
            dist += diff if diff >= 0.0 else -diff
    return dist


def _play_round(
    players: dict[int, PlayerState],
    env: Environment,
    ctxs: list[_NodeCtx],
    t: int,
    noise_row,
):
    """Decide, settle, and observe one round; returns the raw per-node data."""
    n = env.n_nodes
    contract_in: list[Contract | None] = [None] * n
    contracts_out: list[tuple[Contract, ...]] = [()] * n
    actions: list[int] = [0] * n

    for v in range(n):
        a, out = players[v].decide_round(contract_in[v], t)
        actions[v] = a
        contracts_out[v] = out
        ctx = ctxs[v]
        for i in range(ctx.m):
            contract_in[ctx.children[i]] = out[i]

    rewards = [0.0] * n
    utilities = [0.0] * n
    complied = [True] * n
    child_acts_all: list[tuple[int, ...]] = [()] * n
    flats: list[int] = [0] * n
    total_reward = 0.0
    total_utility = 0.0
    for v in range(n):
        ctx = ctxs[v]
        a = actions[v]
        child_acts = tuple(actions[w] for w in ctx.children)
        child_acts_all[v] = child_acts
        flat = ctx.flat(a, child_acts)
        flats[v] = flat
        x = ctx.theta[flat] + noise_row[v]
        u = x
        c_in = contract_in[v]
        if v != 0:
            ok = a == c_in.arm
            complied[v] = ok
            if ok:
                u += c_in.transfer
        out = contracts_out[v]
        for i in range(ctx.m):
            if child_acts[i] == out[i][0]:
                u -= out[i][1]
        rewards[v] = x
        utilities[v] = u
        total_reward += x
        total_utility += u
        players[v].observe_round(t, x, child_acts)

    balance = total_utility - total_reward
    if not -CONSERVATION_TOL <= balance <= CONSERVATION_TOL:
        raise EngineError(f"transfer conservation violated at t={t}: |sum u - sum X| = {abs(balance):.3e}")

    return contract_in, actions, contracts_out, complied, rewards, utilities, child_acts_all, flats


def run_round(
    players: dict[int, PlayerState],
    env: Environment,
    t: int,
    noise_row: np.ndarray | None = None,
    sol: OracleSolution | None = None,
) -> RoundRecord:
    """Play one full round; `noise_row` holds one pre-drawn noise value per node."""
    if sol is None:
        sol = solve_tree(env)
    ctxs = _contexts(sol)
    if noise_row is None:
        noise_row = np.zeros(env.n_nodes)
    contract_in, actions, contracts_out, complied, rewards, utilities, _, _ = _play_round(
        players, env, ctxs, t, noise_row
    )
    return RoundRecord(
        t=t,
        contract_in=contract_in,
        action=np.asarray(actions, dtype=np.int64),
        contracts_out=contracts_out,
        complied=np.asarray(complied, dtype=bool),
        reward=np.asarray(rewards),
        utility=np.asarray(utilities),
    )


def accumulate_regret(record: RoundRecord, sol: OracleSolution, ledger: RegretLedger) -> RegretLedger:
    """Add one round's total/action/payment/deviation regret per node."""
    ctxs = _contexts(sol)
    for v in range(sol.env.n_nodes):
        ctx = ctxs[v]
        a = int(record.action[v])
        child_acts = tuple(int(record.action[w]) for w in ctx.children)
        tot, act, pay, dev = _node_regret(
            ctx, record.contract_in[v], a, ctx.flat(a, child_acts),
            record.contracts_out[v], child_acts, bool(record.complied[v]),
        )
        ledger.total[v] += tot
        ledger.action[v] += act
        ledger.payment[v] += pay
        ledger.deviation[v] += dev
    return ledger


def welfare_and_w1(record: RoundRecord, sol: OracleSolution, ledger: RegretLedger) -> RegretLedger:
    """Add the round's welfare gap and per-node transport distance to equilibrium."""
    ctxs = _contexts(sol)
    theta_sum = 0.0
    for v in range(sol.env.n_nodes):
        ctx = ctxs[v]
        a = int(record.action[v])
        child_acts = tuple(int(record.action[w]) for w in ctx.children)
        theta_sum += ctx.theta[ctx.flat(a, child_acts)]
        ledger.dist_sum[v] += _node_dist(ctx, a, record.contracts_out[v])
    ledger.welfare += sol.welfare - theta_sum
    return ledger


def checkpoint_grid(horizon: int, dense_until: int = 1000, n_geo: int = 100, include=()) -> np.ndarray:
    """Logging rounds: every round up to `dense_until`, then geometric spacing."""
    pts = set(range(1, min(dense_until, horizon) + 1))
    if horizon > dense_until:
        geo = np.geomspace(max(dense_until, 1), horizon, num=n_geo)
        pts.update(int(round(x)) for x in geo)
    pts.update(int(x) for x in include if 1 <= x <= horizon)
    pts.add(horizon)
    return np.asarray(sorted(pts), dtype=np.int64)


class _NoiseBuffer:
    """Chunked per-node noise draws; identical values to per-round sampling."""

    def __init__(self, env: Environment, master_seed: int, chunk: int = 1 << 15):
        self._env = env
        self._streams = [stream(master_seed, v, "noise") for v in range(env.n_nodes)]
        self._chunk = chunk
        self._buf: list | None = None
        self._pos = chunk

    def row(self) -> list:
        if self._pos >= self._chunk:
            rows = [np.asarray(self._env.noise.sample(s, self._chunk), dtype=float)
                    for s in self._streams]
            self._buf = [row.tolist() for row in rows]
            self._pos = 0
        pos = self._pos
        self._pos += 1
        return [row[pos] for row in self._buf]


@dataclass
class RunResult:
    checkpoints: np.ndarray
    total: np.ndarray  # (checkpoints, nodes)
    action: np.ndarray
    payment: np.ndarray
    deviation: np.ndarray
    w1: np.ndarray
    welfare: np.ndarray  # (checkpoints,)
    metadata: dict
    ledger: RegretLedger
    records: list[RoundRecord] | None = None


def horizon_guardrail(env: Environment, horizon: int) -> bool:
    """Whether the horizon is large enough for the theory's schedule; reported, never enforced."""
    D, B, K = env.tree.depth, env.tree.breadth, env.arms
    return math.log(horizon) >= D**2 * math.log(4 * B * K * math.log(horizon))


def run_game(
    env: Environment,
    horizon: int,
    mode: ConstantMode = THEORETICAL,
    master_seed: int = 0,
    *,
    checkpoints: np.ndarray | None = None,
    dense_until: int = 1000,
    n_geo: int = 100,
    collect_records: bool = False,
    trace_path=None,
    sol: OracleSolution | None = None,
    players: dict[int, PlayerState] | None = None,
) -> RunResult:
    """Full simulation of `horizon` rounds; deterministic for a fixed seed.

    `players` is an internal seam for substituting scripted policies in tests;
    by default the full phased-policy tree is built from the environment.
    """
    if sol is None:
        sol = solve_tree(env)
    ctxs = _contexts(sol)
    if players is None:
        players = build_players(env, horizon, mode, master_seed)

    schedule_end = max(p.wait_steps + p.explore_steps for p in players.values())
    if horizon < schedule_end:
        raise EngineError(
            f"horizon {horizon} is smaller than the exploration schedule ({schedule_end} rounds); "
            "no node would reach its commit phase"
        )
    sweep_end = max(p.commit_start + p.stats.size - 1 for p in players.values())
    if horizon < sweep_end:
        warnings.warn(
            f"horizon {horizon} < {sweep_end}: some nodes will not finish their initial sweep",
            RuntimeWarning,
            stacklevel=2,
        )

    if checkpoints is None:
        checkpoints = checkpoint_grid(
            horizon, dense_until, n_geo, include=(horizon // 4, horizon // 2)
        )
    cps = np.asarray(checkpoints, dtype=np.int64)

    n = env.n_nodes
    ledger = RegretLedger(n_nodes=n)
    noise = _NoiseBuffer(env, master_seed)
    out_total = np.zeros((len(cps), n))
    out_action = np.zeros((len(cps), n))
    out_payment = np.zeros((len(cps), n))
    out_deviation = np.zeros((len(cps), n))
    out_w1 = np.zeros((len(cps), n))
    out_welfare = np.zeros(len(cps))
    records: list[RoundRecord] | None = [] if collect_records else None

    trace = open(trace_path, "w", encoding="utf-8", newline="\n") if trace_path else None
    if trace:
        trace.write("t,node,phase,action,reward,utility,rec_in,transfer_in,complied\n")

    led_total = ledger.total
    led_action = ledger.action
    led_payment = ledger.payment
    led_deviation = ledger.deviation
    led_dist = ledger.dist_sum
    welfare_star = sol.welfare

    cp_idx = 0
    cp_next = int(cps[0])
    try:
        for t in range(1, horizon + 1):
            row = noise.row()
            contract_in, actions, contracts_out, complied, rewards, utilities, child_acts_all, flats = (
                _play_round(players, env, ctxs, t, row)
            )
            theta_sum = 0.0
            for v in range(n):
                ctx = ctxs[v]
                a = actions[v]
                child_acts = child_acts_all[v]
                flat = flats[v]
                theta_sum += ctx.theta[flat]
                tot, act, pay, dev = _node_regret(
                    ctx, contract_in[v], a, flat, contracts_out[v], child_acts, complied[v]
                )
                led_total[v] += tot
                led_action[v] += act
                led_payment[v] += pay
                led_deviation[v] += dev
                led_dist[v] += _node_dist(ctx, a, contracts_out[v])
            ledger.welfare += welfare_star - theta_sum
            ledger.rounds = t

            if records is not None:
                records.append(RoundRecord(
                    t=t, contract_in=contract_in, action=np.asarray(actions, dtype=np.int64),
                    contracts_out=contracts_out, complied=np.asarray(complied, dtype=bool),
                    reward=np.asarray(rewards), utility=np.asarray(utilities),
                ))
            if trace:
                for v in range(n):
                    c_in = contract_in[v]
                    trace.write(
                        f"{t},{v},{players[v].phase(t)},{actions[v]},{rewards[v]!r},{utilities[v]!r},"
                        f"{'' if c_in is None else c_in.arm},{'' if c_in is None else repr(c_in.transfer)},"
                        f"{int(complied[v])}\n"
                    )
            if t == cp_next:
                slack = ledger.decomposition_slack()
                if np.any(slack < -DECOMPOSITION_TOL):
                    raise EngineError(
                        f"regret decomposition violated at t={t}: min slack {slack.min():.3e}"
                    )
                out_total[cp_idx] = led_total
                out_action[cp_idx] = led_action
                out_payment[cp_idx] = led_payment
                out_deviation[cp_idx] = led_deviation
                out_w1[cp_idx] = ledger.w1()
                out_welfare[cp_idx] = ledger.welfare
                cp_idx += 1
                cp_next = int(cps[cp_idx]) if cp_idx < len(cps) else 0
    finally:
        if trace:
            trace.close()

    depths = {p.node: p.depth for p in players.values()}
    metadata = {
        "version": __version__,
        "horizon": horizon,
        "master_seed": master_seed,
        "constants": {"mode": mode.kind, "c_scale": mode.c_scale},
        "guardrail_horizon_large_enough": horizon_guardrail(env, horizon),
        "depths": depths,
        "phase_schedule": {
            p.node: {"wait": p.wait_steps, "explore": p.explore_steps, "commit_start": p.commit_start}
            for p in players.values()
        },
        "assumption_params": {
            p.node: {
                "wait": p.own_params.wait, "c": p.own_params.c,
                "kappa": p.own_params.kappa, "zeta": p.own_params.zeta,
            }
            for p in players.values()
        },
        "schedules": {
            p.node: {
                "eta": p.schedule.eta, "alpha": p.schedule.alpha, "beta": p.schedule.beta,
                "t_exp": p.schedule.t_exp, "n_batches": p.schedule.n_batches,
            }
            for p in players.values() if p.schedule is not None
        },
    }
    return RunResult(
        checkpoints=cps, total=out_total, action=out_action, payment=out_payment,
        deviation=out_deviation, w1=out_w1, welfare=out_welfare,
        metadata=metadata, ledger=ledger, records=records,
    )
