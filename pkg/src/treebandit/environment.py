"""Game instances: tree topology, mean-reward tables, noise model, reward draws.

A game instance is a tree of players. Depth is counted from the bottom:
leaves sit at depth 1, the root at depth D. Every non-leaf has exactly B
children. Each node carries a mean-reward table indexed by its own action
and the actions of its children (own action is the first axis), with all
entries in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# Purpose tags for deriving independent, reproducible RNG streams.
_PURPOSES = {"theta": 0, "noise": 1, "policy": 2}


def stream(master_seed: int, node: int = 0, purpose: str = "theta") -> np.random.Generator:
    """Independent generator deterministically derived from (seed, node, purpose)."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, node, _PURPOSES[purpose])))


@dataclass(frozen=True)
class Node:
    id: int
    depth: int  # leaves at depth 1, root at depth D
    parent: int | None
    children: tuple[int, ...]

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class Tree:
    depth: int  # D
    breadth: int  # B
    nodes: tuple[Node, ...]

    @property
    def root(self) -> int:
        return 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[int]:
        return [n.id for n in self.nodes if n.is_leaf]

    def by_depth(self, d: int) -> list[int]:
        return [n.id for n in self.nodes if n.depth == d]

    def validate(self) -> None:
        expected = self.depth if self.breadth == 1 else (self.breadth**self.depth - 1) // (self.breadth - 1)
        if len(self.nodes) != expected:
            raise ValueError(f"node count {len(self.nodes)} != expected {expected}")
        for node in self.nodes:
            if node.depth > 1 and len(node.children) != self.breadth:
                raise ValueError(f"node {node.id} at depth {node.depth} has {len(node.children)} children")
            if node.depth == 1 and node.children:
                raise ValueError(f"leaf {node.id} has children")
            for c in node.children:
                if self.nodes[c].parent != node.id:
                    raise ValueError(f"parent/child link broken between {node.id} and {c}")


def build_tree(depth: int, breadth: int) -> Tree:
    """Breadth-first tree with deterministic numbering: root is node 0."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if breadth < 1:
        raise ValueError(f"breadth must be >= 1, got {breadth}")
    nodes: list[Node] = []
    # Build level by level; nodes at tree level l (root level 0) have depth D - l.
    level = [(0, None)]
    next_id = 1
    for l in range(depth):
        d = depth - l
        new_level: list[tuple[int, int | None]] = []
        for nid, parent in level:
            if d > 1:
                children = tuple(range(next_id, next_id + breadth))
                next_id += breadth
                new_level.extend((c, nid) for c in children)
            else:
                children = ()
            nodes.append(Node(id=nid, depth=d, parent=parent, children=children))
        level = new_level
    nodes.sort(key=lambda n: n.id)
    tree = Tree(depth=depth, breadth=breadth, nodes=tuple(nodes))
    tree.validate()
    return tree


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean reward noise: gaussian(sigma), centered coin flip, or none."""

    kind: str = "gaussian"  # gaussian | bernoulli | none
    sigma: float = 0.1  # gaussian std
    scale: float = 0.5  # bernoulli: returns +/- scale with equal probability

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian" and self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "gaussian":
            return rng.normal(0.0, self.sigma, size=size)
        if self.kind == "bernoulli":
            draws = rng.integers(0, 2, size=size)
            return (2.0 * draws - 1.0) * self.scale
        return 0.0 if size is None else np.zeros(size)

    def to_dict(self) -> dict:
        spec = {"kind": self.kind}
        if self.kind == "gaussian":
            spec["sigma"] = self.sigma
        elif self.kind == "bernoulli":
            spec["scale"] = self.scale
        return spec

    @classmethod
    def from_dict(cls, spec: dict) -> "NoiseModel":
        return cls(**spec)


@dataclass(frozen=True)
class Environment:
    """Immutable game instance: tree, per-node mean-reward tables, noise, arm count.

    ``means[v]`` has shape (K,) * (len(children(v)) + 1); axis 0 is the node's
    own action, axis 1 + i the action of its i-th child (row-major joint order).
    """

    tree: Tree
    arms: int
    means: tuple[np.ndarray, ...]
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int | None = None

    def __post_init__(self):
        if self.arms < 2:
            raise ValueError(f"arm count must be >= 2, got {self.arms}")
        if len(self.means) != self.tree.n_nodes:
            raise ValueError("means table count does not match tree")
        for node in self.tree.nodes:
            want = (self.arms,) * (len(node.children) + 1)
            table = self.means[node.id]
            if table.shape != want:
                raise ValueError(f"node {node.id}: table shape {table.shape} != {want}")
            if np.any(table < 0.0) or np.any(table > 1.0):
                raise ValueError(f"node {node.id}: mean rewards outside [0, 1]")

    @property
    def n_nodes(self) -> int:
        return self.tree.n_nodes

    def to_dict(self) -> dict:
        return {
            "tree": {"depth": self.tree.depth, "breadth": self.tree.breadth},
            "arms": self.arms,
            "noise": self.noise.to_dict(),
            "seed": self.seed,
            "nodes": [
                {
                    "id": n.id,
                    "depth": n.depth,
                    "parent": n.parent,
                    "children": list(n.children),
                    "means": self.means[n.id].reshape(-1).tolist(),
                }
                for n in self.tree.nodes
            ],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, payload: dict) -> "Environment":
        tree = build_tree(payload["tree"]["depth"], payload["tree"]["breadth"])
        arms = payload["arms"]
        means = []
        for entry in sorted(payload["nodes"], key=lambda e: e["id"]):
            shape = (arms,) * (len(entry["children"]) + 1)
            table = np.asarray(entry["means"], dtype=float).reshape(shape)
            table.setflags(write=False)
            means.append(table)
        return cls(
            tree=tree,
            arms=arms,
            means=tuple(means),
            noise=NoiseModel.from_dict(payload["noise"]),
            seed=payload.get("seed"),
        )

    @classmethod
    def from_json(cls, path) -> "Environment":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sample_environment(
    tree: Tree,
    arms: int,
    rng: np.random.Generator,
    noise: NoiseModel | None = None,
    seed: int | None = None,
) -> Environment:
    """Draw every mean-reward entry i.i.d. uniform on [0, 1]."""
    if arms < 2:
        raise ValueError(f"arm count must be >= 2, got {arms}")
    means = []
    for node in tree.nodes:
        shape = (arms,) * (len(node.children) + 1)
        table = rng.uniform(0.0, 1.0, size=shape)
        table.setflags(write=False)
        means.append(table)
    return Environment(
        tree=tree, arms=arms, means=tuple(means),
        noise=noise if noise is not None else NoiseModel(), seed=seed,
    )


def draw_reward(env: Environment, node: int, joint: tuple[int, ...], rng: np.random.Generator) -> float:
    """One stochastic reward for `node` under the realized joint action."""
    table = env.means[node]
    if len(joint) != table.ndim:
        raise ValueError(f"node {node}: joint action arity {len(joint)} != {table.ndim}")
    for a in joint:
        if not 0 <= a < env.arms:
            raise ValueError(f"action index {a} out of range 0..{env.arms - 1}")
    return float(table[joint]) + float(env.noise.sample(rng))
