"""Hindsight solution of a game instance by backward induction, from leaves to root.

For every node the solver produces:

- ``transfers[v][b]``: the minimal payment that makes arm b the node's best
  choice, i.e. max of its extractable values minus the value of b.
- ``net[v]``: mean reward net of the optimal payments to the children.
- ``best[v][a]``: the best net value the node can extract from own action a.
- the equilibrium profile (action, recommendations, payments) per node,
  the welfare optimum, and reward-gap diagnostics.

`brute_force_welfare` is an independent check: it enumerates every joint
action profile and maximizes the raw sum of mean rewards.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .environment import Environment

ENUMERATION_CAP = 10**6


@dataclass(frozen=True)
class ProfileEntry:
    """Equilibrium play for one node: own action, per-child recommendation and payment."""

    action: int
    recommendations: tuple[int, ...]
    transfers: tuple[float, ...]


@dataclass(frozen=True)
class GapReport:
    node: int
    argmax_singleton: bool
    recommendation_gap: float | None  # min net-value margin of the equilibrium recommendation
    reward_gap: float  # min top-two mean-reward gap over child combos (own arms for leaves)


@dataclass(frozen=True)
class OracleSolution:
    env: Environment
    transfers: tuple[np.ndarray, ...]  # per node, payment vector indexed by arm
    net: tuple[np.ndarray, ...]  # per node, mean reward net of child payments
    best: tuple[np.ndarray, ...]  # per node, best net value per own action
    profile: tuple[ProfileEntry, ...]
    welfare: float
    welfare_profile: tuple[int, ...]

    def max_best(self, v: int) -> float:
        return float(self.best[v].max())

    def to_dict(self) -> dict:
        return {
            "welfare": self.welfare,
            "welfare_profile": list(self.welfare_profile),
            "nodes": [
                {
                    "id": v,
                    "transfers": self.transfers[v].tolist(),
                    "best": self.best[v].tolist(),
                    "net": self.net[v].reshape(-1).tolist(),
                    "profile": {
                        "action": self.profile[v].action,
                        "recommendations": list(self.profile[v].recommendations),
                        "transfers": list(self.profile[v].transfers),
                    },
                }
                for v in range(self.env.n_nodes)
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def solve_tree(env: Environment) -> OracleSolution:
    """Exact hindsight quantities for every node, leaves first."""
    n = env.n_nodes
    K = env.arms
    net: list[np.ndarray | None] = [None] * n
    best: list[np.ndarray | None] = [None] * n
    transfers: list[np.ndarray | None] = [None] * n

    # BFS ids put children after parents, so reversed id order is bottom-up.
    for v in range(n - 1, -1, -1):
        node = env.tree.nodes[v]
        if node.is_leaf:
            net[v] = env.means[v]
            best[v] = np.asarray(env.means[v], dtype=float)
        else:
            shift = np.zeros((K,) * len(node.children))
            for axis, child in enumerate(node.children):
                shape = [1] * len(node.children)
                shape[axis] = K
                shift = shift + transfers[child].reshape(shape)
            net_v = env.means[v] - shift[None, ...]
            net[v] = net_v
            best[v] = net_v.reshape(K, -1).max(axis=1)
        transfers[v] = best[v].max() - best[v]

    profile = _equilibrium_profile(env, net, best)
    welfare = float(sum(b.max() for b in best))
    welfare_profile = tuple(entry.action for entry in profile)
    return OracleSolution(
        env=env,
        transfers=tuple(transfers),
        net=tuple(net),
        best=tuple(best),
        profile=tuple(profile),
        welfare=welfare,
        welfare_profile=welfare_profile,
    )


def _equilibrium_profile(env, net, best) -> list[ProfileEntry]:
    """Top-down action profile; argmax ties broken by lowest index."""
    n = env.n_nodes
    K = env.arms
    actions: list[int | None] = [None] * n
    entries: list[ProfileEntry | None] = [None] * n
    actions[0] = int(np.argmax(best[0]))
    for v in range(n):
        node = env.tree.nodes[v]
        a = actions[v]
        if node.is_leaf:
            entries[v] = ProfileEntry(action=a, recommendations=(), transfers=())
            continue
        sub = net[v][a].reshape(-1)
        recs = np.unravel_index(int(np.argmax(sub)), (K,) * len(node.children))
        pays = []
        for child, b in zip(node.children, recs):
            actions[child] = int(b)
            pays.append(float((best[child].max() - best[child])[b]))
        entries[v] = ProfileEntry(action=a, recommendations=tuple(int(b) for b in recs), transfers=tuple(pays))
    return entries


def spne_profile(sol: OracleSolution, node: int) -> ProfileEntry:
    return sol.profile[node]


def brute_force_welfare(env: Environment, cap: int = ENUMERATION_CAP) -> tuple[tuple[int, ...], float]:
    """Exact welfare maximizer by full enumeration; ties -> lexicographically smallest."""
    n = env.n_nodes
    K = env.arms
    if K**n > cap:
        raise ValueError(
            f"enumeration over {K}^{n} profiles exceeds cap {cap}; use solve_tree only"
        )
    best_value = -np.inf
    best_profile: tuple[int, ...] | None = None
    for prof in itertools.product(range(K), repeat=n):
        total = 0.0
        for v in range(n):
            node = env.tree.nodes[v]
            joint = (prof[v],) + tuple(prof[c] for c in node.children)
            total += float(env.means[v][joint])
        if total > best_value:
            best_value = total
            best_profile = prof
    return best_profile, best_value


def healthy_margins(sol: OracleSolution, min_gap: float) -> bool:
    """Whether every equilibrium choice clears `min_gap`.

    Checks each node's own-action margin (top-two gap of its best values) and
    each non-leaf's recommendation margin. Finite-horizon runs cannot separate
    near-ties, so desk-scale experiments screen instances on this predicate.
    """
    for report in reward_gaps(sol):
        best = np.sort(sol.best[report.node])[::-1]
        if best[0] - best[1] < min_gap:
            return False
        if report.recommendation_gap is not None and report.recommendation_gap < min_gap:
            return False
    return True


def reward_gaps(sol: OracleSolution) -> list[GapReport]:
    """Margins around the equilibrium per node; zero gaps are reported, not rejected."""
    env = sol.env
    K = env.arms
    reports = []
    for v in range(env.n_nodes):
        node = env.tree.nodes[v]
        b = sol.best[v]
        singleton = int(np.sum(b == b.max())) == 1

        if node.is_leaf:
            top_two = np.sort(env.means[v])[::-1]
            reports.append(GapReport(node=v, argmax_singleton=singleton,
                                     recommendation_gap=None, reward_gap=float(top_two[0] - top_two[1])))
            continue

        entry = sol.profile[v]
        star = sol.net[v][(entry.action,) + entry.recommendations]
        rec_gap = np.inf
        for axis, b_star in enumerate(entry.recommendations):
            for alt in range(K):
                if alt == b_star:
                    continue
                idx = list(entry.recommendations)
                idx[axis] = alt
                rec_gap = min(rec_gap, float(star - sol.net[v][(entry.action, *idx)]))
        # Smallest top-two margin over child combos, for each own action.
        flat = env.means[v].reshape(K, -1)
        sorted_rows = np.sort(flat, axis=1)[:, ::-1]
        reward_gap = float(np.min(sorted_rows[:, 0] - sorted_rows[:, 1]))
        reports.append(GapReport(node=v, argmax_singleton=singleton,
                                 recommendation_gap=rec_gap, reward_gap=reward_gap))
    return reports
