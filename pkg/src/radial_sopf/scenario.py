"""Time grid, clear-sky index SDE, quantile scenario trees and residual demand."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, InvalidWindow, ParseError, ProfileLengthMismatch

# hours; stage t spans [taus[t], taus[t + 1]]
CASE_STUDY_TAUS = (0.0, 7.0, 10.0, 12.0, 14.0, 16.0, 18.0, 21.0, 24.0, 31.0)

T_DAY = 7.0
T_NIGHT = 21.0

CONSUMPTION_PHASOR = (1 + 0.2j) / math.sqrt(1 + 0.2**2)


@dataclass(frozen=True)
class TimeGrid:
    taus: tuple[float, ...]

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        object.__setattr__(self, "taus", taus)
        if len(taus) < 2:
            raise DomainError("a time grid needs at least two instants")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise DomainError("time grid must be strictly increasing")

    @property
    def n_stages(self) -> int:
        """Number of stages T + 1."""
        return len(self.taus) - 1

    @property
    def T(self) -> int:
        return len(self.taus) - 2

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(np.asarray(self.taus))


CASE_STUDY_GRID = TimeGrid(CASE_STUDY_TAUS)


@dataclass(frozen=True)
class SdeParams:
    """Parameters of the clear-sky index SDE and of the tree generator.

    Defaults are the values used for the 56-bus case study.
    """

    i_ref: float = 0.75
    a: float = 0.75
    sigma: float = 0.7
    alpha: float = 0.8
    beta: float = 0.7
    i0: float = 0.5
    euler_step: float = 0.1
    n_paths: int = 10000

    def __post_init__(self):
        if self.a < 0:
            raise DomainError("mean-reversion speed must be nonnegative")
        if self.alpha < 0.5 or self.beta < 0.5:
            raise DomainError("alpha and beta must be at least 0.5")
        if not (0 <= self.i_ref <= 1 and 0 <= self.i0 <= 1):
            raise DomainError("i_ref and i0 must lie in [0, 1]")
        if not self.euler_step > 0:
            raise DomainError("euler_step must be positive")
        if self.n_paths < 1:
            raise DomainError("n_paths must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SdeParams":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        if "n_paths" in known:
            known["n_paths"] = int(known["n_paths"])
        return cls(**known)


def clear_sky_envelope(tau):
    """Normalized clear-sky solar power at time ``tau`` (hours), in [0, 1]."""
    tau = np.asarray(tau, dtype=float)
    inside = (tau >= T_DAY) & (tau <= T_NIGHT)
    val = 0.5 - 0.5 * np.cos(2 * np.pi * (tau - T_NIGHT) / (T_NIGHT - T_DAY))
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def _euler_steps(t0: float, t1: float, h: float) -> np.ndarray:
    span = t1 - t0
    n_full = int(math.floor(span / h + 1e-9))
    steps = [h] * n_full
    rest = span - n_full * h
    if rest > 1e-12 * max(1.0, span):
        steps.append(rest)
    elif steps:
        # absorb rounding so the steps sum to the window exactly
        steps[-1] = span - h * (n_full - 1)
    return np.asarray(steps)


def _rng(seed, key: Sequence[int] = ()) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def simulate_clear_sky(p: SdeParams, start_value: float, t0: float, t1: float, n: int,
                       seed=0, key: Sequence[int] = ()) -> np.ndarray:
    """Terminal values of ``n`` Euler-Maruyama paths of the clear-sky SDE.

    Steps of ``p.euler_step`` hours, the last one shortened to land on ``t1``;
    states are clamped to [0, 1] after every step.  ``key`` selects an
    independent counter-based stream for the same ``seed``.
    """
    if not t1 > t0:
        raise InvalidWindow(f"empty window [{t0}, {t1}]")
    if not 0 <= start_value <= 1:
        raise DomainError("start value must lie in [0, 1]")
    rng = _rng(seed, key)
    x = np.full(n, float(start_value))
    for h in _euler_steps(t0, t1, p.euler_step):
        dw = rng.standard_normal(n) * math.sqrt(h)
        drift = -p.a * (x - p.i_ref) * h
        diff = p.sigma * np.power(x, p.alpha) * np.power(1.0 - x, p.beta) * dw
        x = np.clip(x + drift + diff, 0.0, 1.0)
    return x


def quantile_levels(c: int) -> np.ndarray:
    """Probability levels (2i - 1) / (2c), i = 1..c."""
    i = np.arange(1, c + 1)
    return (2 * i - 1) / (2.0 * c)


def nearest_rank_quantiles(samples: np.ndarray, levels: np.ndarray) -> np.ndarray:
    s = np.sort(np.asarray(samples))
    m = len(s)
    ranks = np.clip(np.ceil(np.asarray(levels) * m - 1e-12).astype(int), 1, m)
    return s[ranks - 1]


@dataclass(frozen=True)
class TreeNode:
    id: int
    stage: int
    parent: int | None
    value: float
    prob: float


@dataclass(frozen=True)
class ScenarioTree:
    """Node-indexed scenario tree; node ids are stage-major creation order."""

    nodes: tuple[TreeNode, ...]
    branching: tuple[int, ...]
    grid: TimeGrid | None = None

    def __post_init__(self):
        for k, nd in enumerate(self.nodes):
            if nd.id != k:
                raise DomainError("node ids must be 0..K-1 in order")
            if nd.parent is not None and nd.parent >= k:
                raise DomainError("parents must precede children")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_stages(self) -> int:
        return len(self.branching) + 1

    @property
    def parent(self) -> np.ndarray:
        return np.array([-1 if n.parent is None else n.parent for n in self.nodes], dtype=int)

    @property
    def stage(self) -> np.ndarray:
        return np.array([n.stage for n in self.nodes], dtype=int)

    @property
    def value(self) -> np.ndarray:
        return np.array([n.value for n in self.nodes])

    @property
    def weight(self) -> np.ndarray:
        """Probability of reaching each node (sum of descendant leaf probabilities)."""
        return np.array([n.prob for n in self.nodes])

    @property
    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self.nodes]
        for n in self.nodes:
            if n.parent is not None:
                kids[n.parent].append(n.id)
        return kids

    @property
    def leaves(self) -> list[int]:
        return [n.id for n, c in zip(self.nodes, self.children) if not c]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    @property
    def root_of(self) -> np.ndarray:
        return np.zeros(self.n_nodes, dtype=int)

    @property
    def origin(self) -> np.ndarray:
        return np.arange(self.n_nodes)

    def path(self, leaf: int) -> list[int]:
        """Node ids from the root down to ``leaf``."""
        out = []
        cur: int | None = leaf
        while cur is not None:
            out.append(cur)
            cur = self.nodes[cur].parent
        return out[::-1]

    def scenario_paths(self) -> list[list[int]]:
        return [self.path(leaf) for leaf in self.leaves]

    def to_dict(self) -> dict:
        return {
            "grid": {"taus": list(self.grid.taus) if self.grid else None},
            "branching": list(self.branching),
            "nodes": [
                {"id": n.id, "stage": n.stage, **({} if n.parent is None else {"parent": n.parent}),
                 "value": n.value, "prob": n.prob}
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioTree":
        try:
            nodes = tuple(
                TreeNode(int(n["id"]), int(n["stage"]), None if n.get("parent") is None else int(n["parent"]),
                         float(n["value"]), float(n["prob"]))
                for n in d["nodes"]
            )
            taus = (d.get("grid") or {}).get("taus")
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed tree document: {exc}") from exc
        n_stages = max(n.stage for n in nodes) + 1
        branching = d.get("branching")
        if branching is None:
            counts = [sum(1 for n in nodes if n.stage == t) for t in range(n_stages)]
            branching = [counts[t + 1] // counts[t] for t in range(n_stages - 1)]
        return cls(nodes, tuple(int(c) for c in branching), TimeGrid(taus) if taus else None)


@dataclass(frozen=True)
class PathForest:
    """Scenario-path expansion of a tree: one chain of copies per leaf.

    ``origin[k]`` is the tree node duplicated by copy ``k``; copies sharing an
    origin must take equal decisions (explicit non-anticipativity).
    """

    parent: np.ndarray
    stage: np.ndarray
    weight: np.ndarray
    origin: np.ndarray
    root_of: np.ndarray
    value: np.ndarray
    n_stages: int

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    @property
    def leaves(self) -> list[int]:
        has_child = set(int(p) for p in self.parent if p >= 0)
        return [k for k in range(self.n_nodes) if k not in has_child]


def expand_to_paths(tree: ScenarioTree) -> PathForest:
    leaf_prob = {leaf: tree.nodes[leaf].prob for leaf in tree.leaves}
    parent, stage, weight, origin, root_of, value = [], [], [], [], [], []
    for leaf, path in zip(tree.leaves, tree.scenario_paths()):
        root = len(parent)
        for depth, node in enumerate(path):
            k = len(parent)
            parent.append(-1 if depth == 0 else k - 1)
            stage.append(tree.nodes[node].stage)
            weight.append(leaf_prob[leaf])
            origin.append(node)
            root_of.append(root)
            value.append(tree.nodes[node].value)
    return PathForest(np.array(parent), np.array(stage), np.array(weight), np.array(origin),
                      np.array(root_of), np.array(value), tree.n_stages)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RADIAL_SOPF_THREADS", "1")))
    except ValueError:
        return 1


def build_scenario_tree(p: SdeParams, grid: TimeGrid, branching: Sequence[int], seed=0) -> ScenarioTree:
    """Quantile-based tree of the clear-sky index.

    ``branching[t]`` is the number of children of every stage-``t`` node.
    Children of a node are the nearest-rank quantiles at levels
    (2i - 1)/(2C) of ``p.n_paths`` simulated values over the next stage.
    """
    branching = tuple(int(c) for c in branching)
    if len(branching) != grid.T:
        raise DomainError(f"branching needs {grid.T} entries, got {len(branching)}")
    if any(c < 1 for c in branching):
        raise DomainError("branching factors must be at least 1")
    nodes = [TreeNode(0, 0, None, float(p.i0), 1.0)]
    frontier = [0]
    workers = _threads()
    for t in range(1, grid.T + 1):
        c = branching[t - 1]
        levels = quantile_levels(c)
        t0, t1 = grid.taus[t - 1], grid.taus[t]

        def children_values(node_id: int) -> np.ndarray:
            samples = simulate_clear_sky(p, nodes[node_id].value, t0, t1, p.n_paths, seed, key=(node_id,))
            return nearest_rank_quantiles(samples, levels)

        if workers > 1 and len(frontier) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                values = list(ex.map(children_values, frontier))
        else:
            values = [children_values(n) for n in frontier]
        new_frontier = []
        for parent_id, vals in zip(frontier, values):
            for v in vals:
                k = len(nodes)
                nodes.append(TreeNode(k, t, parent_id, float(v), nodes[parent_id].prob / c))
                new_frontier.append(k)
        frontier = new_frontier
    return ScenarioTree(tuple(nodes), branching, grid)


def deterministic_tree(values: Sequence[float], grid: TimeGrid | None = None) -> ScenarioTree:
    """Single-scenario tree with prescribed node values."""
    nodes = tuple(TreeNode(k, k, None if k == 0 else k - 1, float(v), 1.0) for k, v in enumerate(values))
    return ScenarioTree(nodes, (1,) * (len(values) - 1), grid)


def tree_from_branching(values_by_stage, branching: Sequence[int], grid: TimeGrid | None = None) -> ScenarioTree:
    """Tree with given branching where ``values_by_stage(t, i)`` gives the value of
    the i-th node at stage t (in creation order); handy for hand-made instances."""
    nodes = [TreeNode(0, 0, None, float(values_by_stage(0, 0)), 1.0)]
    frontier = [0]
    for t, c in enumerate(branching, start=1):
        nxt = []
        i = 0
        for par in frontier:
            for _ in range(c):
                k = len(nodes)
                nodes.append(TreeNode(k, t, par, float(values_by_stage(t, i)), nodes[par].prob / c))
                nxt.append(k)
                i += 1
        frontier = nxt
    return ScenarioTree(tuple(nodes), tuple(branching), grid)


@dataclass(frozen=True)
class DemandLattice:
    """Per (node, bus) consumption, solar power and residual demand (complex, p.u.)."""

    consumption: np.ndarray
    solar: np.ndarray
    sd: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "sd", self.consumption - self.solar)


def residual_demand(net, tree, grid: TimeGrid, profile: Sequence[float]) -> DemandLattice:
    """Residual demand ``s_cons - p_sol`` for every tree node and bus.

    ``profile[t]`` is the reference consumption of stage ``t``; bus
    consumption is ``profile[t] * (1 + 0.2j)/sqrt(1.04) * peak``.  Solar is
    ``solar_cap * node value * envelope(tau_t)``.
    """
    profile = np.asarray(profile, dtype=float)
    if profile.shape != (grid.n_stages,):
        raise ProfileLengthMismatch(f"profile needs {grid.n_stages} entries, got {profile.size}")
    if np.any(profile < 0):
        raise DomainError("consumption profile must be nonnegative")
    stage = np.asarray(tree.stage)
    if stage.max() >= grid.n_stages:
        raise ProfileLengthMismatch("tree has more stages than the time grid")
    taus = np.asarray(grid.taus)[stage]
    env = np.asarray(clear_sky_envelope(taus))
    peak = np.asarray(net.peak)
    cons = profile[stage][:, None] * CONSUMPTION_PHASOR * peak[None, :]
    solar = (np.asarray(tree.value) * env)[:, None] * np.asarray(net.solar_cap)[None, :]
    cons[:, 0] = 0.0
    solar[:, 0] = 0.0
    return DemandLattice(cons.astype(complex), solar.astype(complex))


def load_profile(path) -> np.ndarray:
    """Read a ``stage,value`` CSV into an array indexed by stage."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        pairs = sorted((int(r["stage"]), float(r["value"])) for r in rows)
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: profile rows need integer 'stage' and numeric 'value'") from exc
    if [s for s, _ in pairs] != list(range(len(pairs))):
        raise ParseError(f"{path}: stages must be 0..T without gaps")
    return np.array([v for _, v in pairs])


def load_tree(path) -> ScenarioTree:
    with open(path, encoding="utf-8") as fh:
        try:
            return ScenarioTree.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
