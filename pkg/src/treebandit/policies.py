"""Per-player decision logic.

Non-leaf players move through three phases on a fixed, deterministic
timetable:

- wait:    idle until the children's behavior has stabilized,
- explore: batched binary search on the payment each child needs, one arm
           at a time, all children probed simultaneously,
- commit:  UCB over joint arms on the payment-shifted instance, offering
           the estimated payments as contracts.

Leaves run the UCB subroutine from the first round.

The depth-indexed exponents (eta, alpha, beta) and the propagation of the
no-regret parameters (wait, c, kappa, zeta) from children to parent follow
the payment-exploration analysis; see ConstantMode for how desk-scale runs
replace the (astronomically conservative) theoretical constants.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .environment import Environment, stream

WAIT, EXPLORE, COMMIT = "wait", "explore", "commit"


class BatchOutcome(Enum):
    CONVERGED = "converged"
    CHILD_ACCEPTED = "accepted"
    CHILD_REFUSED = "refused"


@dataclass(frozen=True)
class ConstantMode:
    """Constant regime for a run.

    ``theoretical`` uses the analysis constants verbatim. At desk-scale
    horizons they are unusable: classification thresholds exceed whole
    batches, extra payments exceed the reward range, and the exploration
    schedule outlasts the horizon. ``scaled`` therefore

    - replaces the no-regret constant c by ``c_scale``,
    - multiplies the UCB exploration bonus by ``c_scale``,
    - shortens batches to ``ceil(c_scale * T^alpha)``,
    - classifies batches by fixed refusal fractions (child accepted at
      <= ``accept_band``, refused at >= 1 - ``accept_band``) instead of the
      theoretical deviation counts, which exceed whole batches,
    - caps the search precision at ``c_scale`` (the theoretical 1/T^beta
      slack per interval update is coarser than the children's actual
      behavioral resolution at desk scale), extending the batch count to
      match.

    Scaled runs record the deviation in their metadata.
    """

    kind: str = "theoretical"  # theoretical | scaled
    c_scale: float = 0.05
    accept_band: float = 0.2

    def __post_init__(self):
        if self.kind not in ("theoretical", "scaled"):
            raise ValueError(f"unknown constant mode {self.kind!r}")
        if self.c_scale <= 0:
            raise ValueError("c_scale must be > 0")
        if not 0.0 < self.accept_band < 0.5:
            raise ValueError("accept_band must be in (0, 0.5)")

    @property
    def scaled(self) -> bool:
        return self.kind == "scaled"

    @property
    def bonus_scale(self) -> float:
        return self.c_scale if self.scaled else 1.0

    def batch_length(self, horizon: int, alpha: float) -> int:
        raw = horizon**alpha
        if self.scaled:
            raw *= self.c_scale
        return max(1, math.ceil(raw))

    def leaf_constant(self, arms: int, horizon: int) -> float:
        if self.scaled:
            return self.c_scale
        return 8.0 * math.sqrt(arms * math.log(arms * horizon**3))

    def propagated_constant(self, arms: int, breadth: int, horizon: int) -> float:
        if self.scaled:
            return self.c_scale
        joint = arms ** (breadth + 1)
        return 10.0 * math.sqrt(joint * math.log(joint * horizon**3))

    def threshold_constant(self, child_c: float, child_kappa: float, t_exp: int, beta_over_alpha: float) -> float:
        """The c fed to classify_batch so the threshold suits the regime."""
        if self.scaled:
            # Classification threshold accept_band * t_exp, expressed through
            # the theoretical threshold shape c * t_exp^(kappa + beta/alpha).
            return self.accept_band * t_exp ** (1.0 - child_kappa - beta_over_alpha)
        return child_c

    def precision(self, horizon: int, beta: float) -> float:
        """Interval slack per search update; never coarser than the theory's."""
        raw = horizon ** (-beta)
        if self.scaled:
            return min(raw, self.c_scale)
        return raw


THEORETICAL = ConstantMode()


@dataclass(frozen=True)
class ScheduleParams:
    """Depth-indexed exponents and the derived batch geometry."""

    depth: int
    eta: float
    alpha: float
    beta: float
    t_exp: int  # steps per payment-exploration batch
    n_batches: int  # batches per arm
    precision: float = 0.0  # interval slack per update (1/T^beta theoretically)


def schedule_params(depth: int, tree_depth: int, horizon: int, mode: ConstantMode = THEORETICAL) -> ScheduleParams:
    if depth < 2:
        raise ValueError("exploration schedule is undefined for leaves (depth 1)")
    if depth > tree_depth:
        raise ValueError(f"depth {depth} exceeds tree depth {tree_depth}")
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    d = depth
    eta = 1.0 / (2 * d * (d - 1))
    alpha = (tree_depth + 1) * (d - 1) / (tree_depth * d)
    beta = 1.0 / (2 * d)
    # The layer below must be learnable within a batch; holds by construction.
    kappa_below = 0.5 if d == 2 else 1.0 - 1.0 / (2 * (d - 1))
    if beta / alpha >= 1.0 - kappa_below:
        raise RuntimeError(
            f"schedule bug: beta/alpha = {beta / alpha:.4f} >= 1 - kappa = {1 - kappa_below:.4f} at depth {d}"
        )
    t_exp = mode.batch_length(horizon, alpha)
    precision = mode.precision(horizon, beta)
    # Halving must reach the precision floor: ceil(log2(T^beta)) theoretically.
    n_batches = max(1, math.ceil(math.log2(1.0 / precision)))
    return ScheduleParams(
        depth=d, eta=eta, alpha=alpha, beta=beta, t_exp=t_exp, n_batches=n_batches, precision=precision
    )


@dataclass(frozen=True)
class AssumptionParams:
    """No-regret profile of a player: wait time, constant, exponent, confidence."""

    wait: int
    c: float
    kappa: float
    zeta: float


def leaf_params(arms: int, horizon: int, mode: ConstantMode = THEORETICAL) -> AssumptionParams:
    if arms < 2:
        raise ValueError("arm count must be >= 2")
    if horizon < 2:
        raise ValueError("horizon must be >= 2")
    return AssumptionParams(wait=0, c=mode.leaf_constant(arms, horizon), kappa=0.5, zeta=2.0)


def aggregate_params(children: list[AssumptionParams]) -> AssumptionParams:
    """Dominating profile over a set of children: worst case in every field."""
    if not children:
        raise ValueError("children list must be nonempty")
    return AssumptionParams(
        wait=max(p.wait for p in children),
        c=max(p.c for p in children),
        kappa=max(p.kappa for p in children),
        zeta=min(p.zeta for p in children),
    )


def propagate_params(
    children: list[AssumptionParams],
    sched: ScheduleParams,
    arms: int,
    breadth: int,
    horizon: int,
    mode: ConstantMode = THEORETICAL,
) -> AssumptionParams:
    """No-regret profile of a parent running the phased policy over `children`."""
    agg = aggregate_params(children)
    # Scaled runs idle one extra batch so freshly-committed children are past
    # their UCB burn-in before the first probe batch is classified.
    settle = sched.t_exp if mode.scaled else 0
    wait = agg.wait + settle + arms * sched.t_exp * sched.n_batches
    c = mode.propagated_constant(arms, breadth, horizon)
    kappa = max(0.5, agg.kappa + sched.eta, 1.0 - sched.beta)
    eps = math.log(4 * breadth * arms * math.log(horizon)) / math.log(horizon)
    zeta = sched.alpha * agg.zeta - eps
    if zeta <= 0:
        warnings.warn(
            f"confidence exponent {zeta:.3f} <= 0: horizon {horizon} is too small for this tree",
            RuntimeWarning,
            stacklevel=2,
        )
    return AssumptionParams(wait=wait, c=c, kappa=kappa, zeta=zeta)


class Contract(NamedTuple):
    """Recommended arm plus the transfer paid iff the child plays it exactly."""

    arm: int
    transfer: float


class UcbStats:
    """Pull counts and running means of payment-shifted rewards over joint arms.

    Joint-arm spaces are tiny (K^(B+1)), so everything is kept in plain
    Python lists; `index` caches mean + exploration bonus per arm and is
    refreshed on update, making selection a single scan.
    """

    __slots__ = ("shape", "size", "own_block", "counts", "means", "index",
                 "log_term", "coeff", "init_cursor")

    def __init__(self, shape: tuple[int, ...], horizon: int, bonus_scale: float = 1.0):
        size = 1
        for dim in shape:
            size *= dim
        self.shape = shape
        self.size = size
        self.own_block = size // shape[0]
        self.counts = [0] * size
        self.means = [0.0] * size
        self.index = [math.inf] * size
        self.log_term = math.log(size * horizon**3)
        self.coeff = 2.0 * bonus_scale
        self.init_cursor = 0

    def bonus(self, idx: int) -> float:
        n = self.counts[idx]
        return math.inf if n == 0 else self.coeff * math.sqrt(self.log_term / n)

    def flat_index(self, joint: tuple[int, ...]) -> int:
        idx = 0
        for coord, dim in zip(joint, self.shape):
            idx = idx * dim + coord
        return idx

    def unravel(self, idx: int) -> tuple[int, ...]:
        out = []
        for dim in reversed(self.shape):
            idx, r = divmod(idx, dim)
            out.append(r)
        return tuple(reversed(out))


def ucb_select(stats: UcbStats, parent: Contract | None) -> tuple[int, ...]:
    """Joint arm to play: init sweep first, then bonus-adjusted argmax.

    Ties break to the lowest joint index. A parent contract adds its transfer
    to every joint arm whose own-action coordinate equals the recommendation.
    """
    counts = stats.counts
    cur = stats.init_cursor
    size = stats.size
    while cur < size and counts[cur] > 0:
        cur += 1
    stats.init_cursor = cur
    if cur < size:
        return stats.unravel(cur)
    index = stats.index
    if parent is None:
        best, best_score = 0, index[0]
        for j in range(1, size):
            if index[j] > best_score:
                best, best_score = j, index[j]
    else:
        start = parent.arm * stats.own_block
        end = start + stats.own_block
        tau = parent.transfer
        best, best_score = -1, -math.inf
        for j in range(size):
            score = index[j] + tau if start <= j < end else index[j]
            if score > best_score:
                best, best_score = j, score
    return stats.unravel(best)


def ucb_update(stats: UcbStats, played: tuple[int, ...], complied: bool, shifted_reward: float) -> None:
    """Fold one observation into the running mean; discarded unless complied."""
    if not complied:
        return
    idx = stats.flat_index(played)
    n = stats.counts[idx] + 1
    stats.counts[idx] = n
    mean = stats.means[idx] + (shifted_reward - stats.means[idx]) / n
    stats.means[idx] = mean
    stats.index[idx] = mean + stats.coeff * math.sqrt(stats.log_term / n)


def classify_batch(
    refusals: int, t_exp: int, c: float, kappa: float, beta_over_alpha: float
) -> BatchOutcome:
    """Read a finished batch: converged / child accepted / child refused.

    The threshold c * t_exp^(kappa + beta/alpha) absorbs the deviations a
    no-regret child is allowed while still preferring one side.
    """
    if refusals < 0 or refusals > t_exp:
        raise ValueError(f"refusal count {refusals} outside 0..{t_exp}")
    threshold = c * t_exp ** (kappa + beta_over_alpha)
    if threshold < refusals < t_exp - threshold:
        return BatchOutcome.CONVERGED
    if refusals <= t_exp - threshold:
        return BatchOutcome.CHILD_ACCEPTED
    return BatchOutcome.CHILD_REFUSED


def finalize_incentive(
    high: float, horizon: int, beta: float, c: float, breadth: int, eta: float,
    precision: float | None = None,
) -> float:
    """Estimated payment: interval ceiling plus precision and enforcement margins.

    May exceed 1: transfers are unbounded above, only rewards live in [0, 1].
    The margins keep the estimate above the optimal payment, which is what
    forces compliance; clipping would break that guarantee. `precision`
    defaults to the theoretical 1/T^beta slack.
    """
    if precision is None:
        precision = horizon ** (-beta)
    return high + precision + c * breadth * horizon ** (-eta)


@dataclass
class SearchState:
    """Binary-search interval for one (child, arm) pair."""

    low: float = 0.0
    high: float = 1.0
    mid: float = 0.5
    refusals: int = 0
    batches_done: int = 0
    status: str = "pending"  # pending | active | converged | exhausted
    estimate: float | None = None


def apply_batch_outcome(search: SearchState, outcome: BatchOutcome, slack: float) -> None:
    """Fold one classified batch into the interval.

    Acceptance lowers the ceiling, refusal raises the floor, each padded by
    one slack. Convergence means the optimal payment sits within one slack of
    the offered mid: the interval tightens to that window and freezes (the
    frozen mid keeps being offered for the arm's remaining batches).
    """
    if outcome is BatchOutcome.CONVERGED:
        search.low = max(0.0, search.mid - slack)
        search.high = min(1.0, search.mid + slack)
        search.status = "converged"
    elif outcome is BatchOutcome.CHILD_ACCEPTED:
        search.high = search.mid + slack
    else:
        search.low = search.mid - slack
    search.batches_done += 1


@dataclass
class PlayerState:
    node: int
    depth: int
    children: tuple[int, ...]
    arms: int
    horizon: int
    own_params: AssumptionParams
    stats: UcbStats
    rng: np.random.Generator
    schedule: ScheduleParams | None = None
    child_params: AssumptionParams | None = None
    threshold_c: float = 0.0  # c fed to classify_batch (mode-dependent)
    wait_steps: int = 0
    explore_steps: int = 0
    bonus_scale: float = 1.0
    fixed_rec: int | None = None
    searches: list[list[SearchState]] = field(default_factory=list)  # [child_idx][arm]
    estimates: list[list[float]] = field(default_factory=list)  # [child_idx] -> payment per arm
    preplay: list[int] | None = None  # pre-drawn uniform actions for wait+explore
    last_selection: tuple[int, ...] | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def commit_start(self) -> int:
        """First commit-phase round (1-based)."""
        return self.wait_steps + self.explore_steps + 1

    def phase(self, t: int) -> str:
        if t > self.wait_steps + self.explore_steps:
            return COMMIT
        return WAIT if t <= self.wait_steps else EXPLORE

    def explore_position(self, t: int) -> tuple[int, int, int]:
        """(arm under search, batch index, step within batch), all 0-based."""
        s = t - self.wait_steps - 1
        per_arm = self.schedule.t_exp * self.schedule.n_batches
        return s // per_arm, (s % per_arm) // self.schedule.t_exp, s % self.schedule.t_exp

    def decide_round(self, parent: Contract | None, t: int):
        return decide(self, parent, t)

    def observe_round(self, t: int, reward: float, child_actions: tuple[int, ...]) -> None:
        observe(self, t, reward, child_actions)


def decide(state: PlayerState, parent: Contract | None, t: int) -> tuple[int, tuple[Contract, ...]]:
    """One round of play: own action plus contracts for children (in child order)."""
    if t > state.wait_steps + state.explore_steps:  # commit
        joint = ucb_select(state.stats, parent)
        state.last_selection = joint
        if not state.children:
            return joint[0], ()
        contracts = tuple(
            Contract(joint[1 + i], state.estimates[i][joint[1 + i]])
            for i in range(len(state.children))
        )
        return joint[0], contracts

    state.last_selection = None
    action = state.preplay[t - 1]
    if t <= state.wait_steps:
        return action, tuple(Contract(state.fixed_rec, 0.0) for _ in state.children)

    arm, _batch, pos = state.explore_position(t)
    if pos == 0:
        for row in state.searches:
            search = row[arm]
            if search.status == "pending":
                search.status = "active"
            if search.status == "active":
                search.mid = 0.5 * (search.low + search.high)
                search.refusals = 0
    return action, tuple(Contract(arm, row[arm].mid) for row in state.searches)


def observe(state: PlayerState, t: int, reward: float, child_actions: tuple[int, ...]) -> None:
    """End-of-round bookkeeping: refusal counters, interval updates, UCB stats."""
    if t > state.wait_steps + state.explore_steps:  # commit
        joint = state.last_selection
        if joint is None:
            return
        complied = True
        shift = 0.0
        for i in range(len(state.children)):
            rec = joint[1 + i]
            if child_actions[i] != rec:
                complied = False
            shift += state.estimates[i][rec]
        first_pull = state.stats.counts[state.stats.flat_index(joint)] == 0
        ucb_update(state.stats, joint, complied or first_pull, reward - shift)
        return

    if t <= state.wait_steps:
        return

    arm, batch, pos = state.explore_position(t)
    sched = state.schedule
    for i, row in enumerate(state.searches):
        search = row[arm]
        if search.status == "active" and child_actions[i] != arm:
            search.refusals += 1
    if pos == sched.t_exp - 1:
        slack = sched.precision
        cp = state.child_params
        for i, row in enumerate(state.searches):
            search = row[arm]
            if search.status == "active":
                outcome = classify_batch(
                    search.refusals, sched.t_exp, state.threshold_c, cp.kappa, sched.beta / sched.alpha
                )
                apply_batch_outcome(search, outcome, slack)
            if batch == sched.n_batches - 1:
                if search.status == "active":
                    search.status = "exhausted"
                est = finalize_incentive(
                    search.high, state.horizon, sched.beta, cp.c, len(state.children),
                    sched.eta, precision=slack,
                )
                search.estimate = est
                state.estimates[i][arm] = est


def build_players(
    env: Environment,
    horizon: int,
    mode: ConstantMode = THEORETICAL,
    master_seed: int = 0,
) -> dict[int, PlayerState]:
    """One PlayerState per node, with the phase timetable wired bottom-up."""
    K = env.arms
    D = env.tree.depth
    schedules: dict[int, ScheduleParams] = {
        d: schedule_params(d, D, horizon, mode) for d in range(2, D + 1)
    }
    params: dict[int, AssumptionParams] = {}
    players: dict[int, PlayerState] = {}
    for v in range(env.n_nodes - 1, -1, -1):
        node = env.tree.nodes[v]
        rng = stream(master_seed, v, "policy")
        if node.is_leaf:
            own = leaf_params(K, horizon, mode)
            players[v] = PlayerState(
                node=v, depth=node.depth, children=(), arms=K, horizon=horizon,
                own_params=own, stats=UcbStats((K,), horizon, mode.bonus_scale), rng=rng,
                bonus_scale=mode.bonus_scale,
            )
        else:
            sched = schedules[node.depth]
            child_list = [params[w] for w in node.children]
            agg = aggregate_params(child_list)
            own = propagate_params(child_list, sched, K, len(node.children), horizon, mode)
            explore_steps = K * sched.t_exp * sched.n_batches
            wait_steps = own.wait - explore_steps  # children's wait plus any settle buffer
            fixed_rec = int(rng.integers(K))
            preplay = rng.integers(0, K, size=min(wait_steps + explore_steps, horizon)).tolist()
            players[v] = PlayerState(
                node=v, depth=node.depth, children=node.children, arms=K, horizon=horizon,
                own_params=own,
                stats=UcbStats((K,) * (len(node.children) + 1), horizon, mode.bonus_scale),
                rng=rng,
                schedule=sched,
                child_params=agg,
                threshold_c=mode.threshold_constant(agg.c, agg.kappa, sched.t_exp, sched.beta / sched.alpha),
                wait_steps=wait_steps,
                explore_steps=explore_steps,
                bonus_scale=mode.bonus_scale,
                fixed_rec=fixed_rec,
                searches=[[SearchState() for _ in range(K)] for _ in node.children],
                estimates=[[0.0] * K for _ in node.children],
                preplay=preplay,
            )
        params[v] = own
    return players


@dataclass(frozen=True)
class ExactBestResponder:
    """Scripted child: accepts (arm, transfer) iff it matches its best value.

    Accepts when value(arm) + transfer >= max value; otherwise plays its
    argmax. Used by search demos and deterministic tests.
    """

    values: np.ndarray

    def respond(self, contract: Contract | None) -> int:
        if contract is not None and self.values[contract.arm] + contract.transfer >= self.values.max():
            return int(contract.arm)
        return int(np.argmax(self.values))

    @property
    def optimal_transfers(self) -> np.ndarray:
        return self.values.max() - self.values


class ScriptedPlayer:
    """Engine-compatible leaf that best-responds exactly; for tests and demos.

    Plays the recommended arm iff the offered transfer covers its value gap,
    otherwise its argmax. Keeps no statistics.
    """

    def __init__(self, node: int, depth: int, values: np.ndarray, horizon: int):
        self.node = node
        self.depth = depth
        self.children: tuple[int, ...] = ()
        self.responder = ExactBestResponder(values=np.asarray(values, dtype=float))
        self.own_params = AssumptionParams(wait=0, c=0.0, kappa=0.5, zeta=math.inf)
        self.schedule = None
        self.wait_steps = 0
        self.explore_steps = 0
        self.stats = UcbStats((1,), horizon)
        self.commit_start = 1

    def phase(self, t: int) -> str:
        return COMMIT

    def decide_round(self, parent: Contract | None, t: int):
        return self.responder.respond(parent), ()

    def observe_round(self, t: int, reward: float, child_actions: tuple[int, ...]) -> None:
        pass


@dataclass(frozen=True)
class BatchRow:
    batch: int
    low: float
    mid: float
    high: float
    refusals: int
    outcome: str


@dataclass(frozen=True)
class SearchReport:
    arm: int
    optimal: float
    rows: tuple[BatchRow, ...]
    low: float
    high: float
    estimate: float
    t_exp: int
    n_batches: int


def run_search(
    child: ExactBestResponder,
    arm: int,
    horizon: int,
    alpha: float,
    beta: float,
    eta: float,
    c: float = 1.0,
    kappa: float = 0.5,
    breadth: int = 1,
) -> SearchReport:
    """Standalone batched binary search against a scripted child.

    The scripted child's response to a fixed offer is constant, so each batch
    resolves to 0 or t_exp refusals without stepping through rounds.
    """
    t_exp = math.ceil(horizon**alpha)
    n_batches = max(1, math.ceil(math.log2(horizon**beta)))
    slack = horizon ** (-beta)
    state = SearchState()
    rows = []
    for batch in range(n_batches):
        if state.status in ("pending", "active"):
            state.status = "active"
            state.mid = 0.5 * (state.low + state.high)
            accepted = child.respond(Contract(arm, state.mid)) == arm
            state.refusals = 0 if accepted else t_exp
            outcome = classify_batch(state.refusals, t_exp, c, kappa, beta / alpha)
            apply_batch_outcome(state, outcome, slack)
            label = outcome.value
        else:
            label = "frozen"
        rows.append(BatchRow(batch=batch, low=state.low, mid=state.mid, high=state.high,
                             refusals=state.refusals, outcome=label))
    estimate = finalize_incentive(state.high, horizon, beta, c, breadth, eta)
    return SearchReport(
        arm=arm, optimal=float(child.optimal_transfers[arm]), rows=tuple(rows),
        low=state.low, high=state.high, estimate=estimate, t_exp=t_exp, n_batches=n_batches,
    )
