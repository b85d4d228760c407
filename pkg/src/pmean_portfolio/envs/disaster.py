"""Post-disaster aid allocation across population clusters.

Each cluster carries a remaining need, discretized in units of the increment
``b`` and clipped to ``need_cap``. Every step the planner hands out at most
``B`` in multiples of ``b``. A cluster that receives at least its need drops
to zero; otherwise its need falls by the allocation with ``success_prob`` or
grows by ``b`` with ``balloon_prob``.

Each cluster is one stakeholder. Its per-step reward is

    0.5 * min(a_c, s_c) / initial_need_c + 0.5 * aid_share_c

where ``aid_share_c`` is ``a_c / (H * B)`` (share of all aid available over
the horizon) by default, or ``a_c / sum(a)`` with ``aid_share="step"``.
Zero rewards are raised to ``L = 1e-3 * U`` so the MDP has positive rewards;
this fixes the condition number at 1000.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from .. import _seeding
from ..mdp import LOWER_BOUND_FRACTION, FiniteMDP, MDPError
from ..policy import Policy, PolicySet

DENSITY = ("High", "Low")
PROXIMITY = ("Near", "Far")
INCOME = ("Low", "Middle", "High")

PRIORITIES = (
    "lowest-income",
    "highest-population",
    "highest-unmet-need",
    "highest-need-per-capita",
    "high-density",
    "far-from-infrastructure",
)

DEFAULT_REDUCED_IDS = (2, 4, 7, 11)
DEFAULT_MAX_STATES = 10_000
DEFAULT_MAX_ACTIONS = 2_000
AID_SHARES = ("horizon", "step")


class EnvironmentSizeError(MDPError):
    """Refusal to build a tabular MDP above the configured size caps."""

    def __init__(self, n_states: int, n_actions: int, max_states: int, max_actions: int):
        super().__init__(
            f"instance has {n_states} states and {n_actions} actions; caps are "
            f"{max_states} states and {max_actions} actions"
        )
        self.n_states = n_states
        self.n_actions = n_actions


@dataclass(frozen=True)
class ClusterSpec:
    id: int
    density: str
    proximity: str
    income: str
    population: int
    initial_need: int

    def __post_init__(self) -> None:
        if self.population <= 0:
            raise ValueError(f"cluster {self.id}: population must be positive")
        if self.initial_need < 0:
            raise ValueError(f"cluster {self.id}: initial need must be >= 0")
        if self.density not in DENSITY or self.proximity not in PROXIMITY or self.income not in INCOME:
            raise ValueError(f"cluster {self.id}: unknown category in {self}")


def load_clusters() -> tuple[ClusterSpec, ...]:
    """The bundled 12-cluster population table."""
    text = resources.files(__package__).joinpath("data/clusters.json").read_text()
    return tuple(ClusterSpec(**c) for c in json.loads(text)["clusters"])


@dataclass(frozen=True)
class DisasterConfig:
    clusters: tuple[ClusterSpec, ...]
    increment: int = 50
    budget: int = 150
    horizon: int = 4
    success_prob: float = 0.7
    balloon_prob: float = 0.3
    need_cap: int = 150
    aid_share: str = "horizon"

    def __post_init__(self) -> None:
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.clusters:
            raise ValueError("at least one cluster is required")
        if abs(self.success_prob + self.balloon_prob - 1.0) > 1e-12:
            raise ValueError("success_prob + balloon_prob must equal 1")
        if self.increment <= 0 or self.budget % self.increment:
            raise ValueError("increment must be positive and divide the budget")
        if self.need_cap <= 0 or self.need_cap % self.increment:
            raise ValueError("need_cap must be a positive multiple of the increment")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.aid_share not in AID_SHARES:
            raise ValueError(f"aid_share must be one of {AID_SHARES}")

    @classmethod
    def full(cls, **kwargs: Any) -> DisasterConfig:
        return cls(load_clusters(), **kwargs)

    @classmethod
    def reduced(cls, cluster_ids: Sequence[int] = DEFAULT_REDUCED_IDS, **kwargs: Any) -> DisasterConfig:
        table = {c.id: c for c in load_clusters()}
        return cls(tuple(table[i] for i in cluster_ids), **kwargs)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def levels(self) -> int:
        """Number of need levels per cluster (0, b, ..., need_cap)."""
        return self.need_cap // self.increment + 1

    @property
    def units(self) -> int:
        return self.budget // self.increment

    def initial_levels(self) -> np.ndarray:
        need = np.array([min(c.initial_need, self.need_cap) for c in self.clusters])
        return -(-need // self.increment)

    def to_json(self) -> dict[str, Any]:
        doc = asdict(self)
        doc["clusters"] = [asdict(c) for c in self.clusters]
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> DisasterConfig:
        doc = dict(doc)
        if "cluster_ids" in doc:
            ids = doc.pop("cluster_ids")
            return cls.reduced(ids, **doc)
        clusters = doc.pop("clusters", None)
        clusters = load_clusters() if clusters is None else tuple(ClusterSpec(**c) for c in clusters)
        return cls(clusters, **doc)


# --------------------------------------------------------------------------
# state and action indexing


def allocation_table(config: DisasterConfig) -> np.ndarray:
    """Every allocation in units of ``b`` with total at most ``B``, lexicographic, shape (A, C)."""
    rows = [
        a for a in itertools.product(range(config.units + 1), repeat=config.n_clusters) if sum(a) <= config.units
    ]
    return np.array(rows, dtype=np.int64)


def state_table(config: DisasterConfig) -> np.ndarray:
    """Need levels of every joint state, mixed-radix order with cluster 0 most significant."""
    return np.array(list(itertools.product(range(config.levels), repeat=config.n_clusters)), dtype=np.int64)


def state_index(config: DisasterConfig, levels: np.ndarray) -> np.ndarray:
    levels = np.asarray(levels, dtype=np.int64)
    radix = config.levels ** np.arange(config.n_clusters - 1, -1, -1, dtype=np.int64)
    return levels @ radix


def feasible_actions(config: DisasterConfig, levels: Sequence[int]) -> np.ndarray:
    """Indices of allocations that give nothing to zero-need clusters."""
    alloc = allocation_table(config)
    zero = np.asarray(levels) == 0
    return np.nonzero(~np.any(alloc[:, zero] > 0, axis=1))[0]


def cluster_kernel(config: DisasterConfig) -> np.ndarray:
    """Single-cluster transition M[level, units, next_level]."""
    n, u = config.levels, config.units
    M = np.zeros((n, u + 1, n))
    for lev in range(n):
        for a in range(u + 1):
            if a >= lev:
                M[lev, a, 0] = 1.0
            else:
                M[lev, a, lev - a] += config.success_prob
                M[lev, a, min(lev + 1, n - 1)] += config.balloon_prob
    return M


def _rewards(config: DisasterConfig, levels: np.ndarray, alloc: np.ndarray) -> np.ndarray:
    """Raw per-cluster step rewards, shape (..., C) for broadcastable levels/alloc in units."""
    b = config.increment
    need0 = np.array([c.initial_need for c in config.clusters], dtype=float)
    met = np.minimum(alloc, levels) * b
    need_frac = np.divide(met, need0, out=np.zeros(np.broadcast(met, need0).shape), where=need0 > 0)
    if config.aid_share == "horizon":
        share = alloc * b / (config.horizon * config.budget)
    else:
        total = alloc.sum(axis=-1, keepdims=True)
        share = np.divide(alloc, total, out=np.zeros(np.broadcast(alloc, total).shape), where=total > 0)
    return 0.5 * need_frac + 0.5 * share


def build_disaster_mdp(
    config: DisasterConfig,
    max_states: int = DEFAULT_MAX_STATES,
    max_actions: int = DEFAULT_MAX_ACTIONS,
) -> FiniteMDP:
    """Tabular MDP over joint need levels; refuses instances above the size caps."""
    C = config.n_clusters
    n_states = config.levels**C
    n_actions = math.comb(config.units + C, C)
    if n_states > max_states or n_actions > max_actions:
        raise EnvironmentSizeError(n_states, n_actions, max_states, max_actions)
    states = state_table(config)
    alloc = allocation_table(config)
    M = cluster_kernel(config)
    T = np.ones((n_states, len(alloc), n_states))
    for c in range(C):
        T *= M[states[:, c][:, None, None], alloc[:, c][None, :, None], states[:, c][None, None, :]]
    raw = _rewards(config, states[:, None, :], alloc[None, :, :])  # (S, A, C)
    U = float(raw.max())
    L = LOWER_BOUND_FRACTION * U
    R = np.maximum(np.moveaxis(raw, -1, 0), L)
    b = config.increment
    return FiniteMDP(
        T,
        R,
        config.horizon,
        int(state_index(config, config.initial_levels())),
        L,
        U,
        state_labels=tuple("/".join(str(int(v) * b) for v in s) for s in states),
        action_labels=tuple("/".join(str(int(v) * b) for v in a) for a in alloc),
        name=f"disaster-{C}",
    )



# --------------------------------------------------------------------------
# priority rules


def static_features(config: DisasterConfig) -> np.ndarray:
    """Per-cluster scores in [0, 1] for the need-independent priorities, shape (C, 6).

    Columns follow ``PRIORITIES``; the two need columns are left at zero and
    filled in by :func:`features`.
    """
    pop = np.array([c.population for c in config.clusters], dtype=float)
    F = np.zeros((config.n_clusters, len(PRIORITIES)))
    F[:, 0] = [{"Low": 1.0, "Middle": 0.5, "High": 0.0}[c.income] for c in config.clusters]
    F[:, 1] = pop / pop.max()
    F[:, 4] = [1.0 if c.density == "High" else 0.0 for c in config.clusters]
    F[:, 5] = [1.0 if c.proximity == "Far" else 0.0 for c in config.clusters]
    return F


def features(config: DisasterConfig, remaining: np.ndarray) -> np.ndarray:
    """Priority scores for a batch of remaining needs (n, C) in resource units, shape (n, C, 6)."""
    pop = np.array([c.population for c in config.clusters], dtype=float)
    F = np.broadcast_to(static_features(config), remaining.shape + (len(PRIORITIES),)).copy()
    F[..., 2] = remaining / config.need_cap
    per_capita = remaining / pop
    F[..., 3] = per_capita / (config.need_cap / pop).max()
    return F


@dataclass(frozen=True)
class PriorityRule:
    """How a policy ranks clusters when handing out the next chunk of aid.

    ``weights`` scores clusters by a convex combination of the six priority
    features. ``seed`` instead gives every (step, state) its own random cluster
    order, fixed by hashing.
    """

    id: str
    weights: tuple[float, ...] | None = None
    seed: int | None = None

    def scores(self, config: DisasterConfig, levels: np.ndarray, remaining: np.ndarray, step: int) -> np.ndarray:
        if self.weights is not None:
            return features(config, remaining) @ np.asarray(self.weights)
        keys = state_index(config, levels).astype(np.uint64)
        base = _seeding.sample_seeds(_seeding.hash_seed(self.seed, step), keys)
        return _seeding.uniforms(_seeding.split(base, config.n_clusters).ravel(), 0, 0).reshape(remaining.shape)


def allocate(config: DisasterConfig, rule: PriorityRule, levels: np.ndarray, step: int) -> np.ndarray:
    """Greedy allocation for a batch of need levels (n, C), in units of ``b``.

    Each chunk of ``b`` goes to the highest-scoring cluster with unmet need
    (lowest cluster index on ties), whose remaining need then drops by ``b``.
    Leftover budget stays unspent once every need is covered.
    """
    levels = np.asarray(levels, dtype=np.int64)
    b = config.increment
    remaining = (levels * b).astype(float)
    alloc = np.zeros_like(levels)
    rows = np.arange(len(levels))
    fixed = None if rule.weights is not None else rule.scores(config, levels, remaining, step)
    for _ in range(config.units):
        open_ = remaining > 0
        if not open_.any():
            break
        s = fixed if fixed is not None else rule.scores(config, levels, remaining, step)
        s = np.where(open_, s, -np.inf)
        pick = np.argmax(s, axis=1)
        live = open_.any(axis=1)
        alloc[rows[live], pick[live]] += 1
        remaining[rows[live], pick[live]] = np.maximum(remaining[rows[live], pick[live]] - b, 0.0)
    return alloc


def pure_rules() -> list[PriorityRule]:
    return [PriorityRule(f"priority-{name}", weights=tuple(float(i == k) for i in range(len(PRIORITIES))))
            for k, name in enumerate(PRIORITIES)]


def generate_rules(count: int, seed: int) -> list[PriorityRule]:
    """The six pure priorities, then Dirichlet convex weightings, then random orders.

    Past the pure rules, half of the remaining slots (rounded down) get convex
    weightings and the rest get per-state random orders.
    """
    if count < len(PRIORITIES):
        raise ValueError(f"count must be >= {len(PRIORITIES)}")
    rng = np.random.default_rng(seed)
    rest = count - len(PRIORITIES)
    n_convex = rest // 2
    n_random = rest - n_convex
    width = len(str(max(n_convex, n_random, 1) - 1))
    W = rng.dirichlet(np.ones(len(PRIORITIES)), size=n_convex)
    rules = pure_rules()
    rules += [PriorityRule(f"convex-{i:0{width}d}", weights=tuple(float(x) for x in w)) for i, w in enumerate(W)]
    seeds = rng.integers(0, 2**63, size=n_random)
    rules += [PriorityRule(f"order-{i:0{width}d}", seed=int(s)) for i, s in enumerate(seeds)]
    return rules


def _action_lookup(config: DisasterConfig) -> tuple[np.ndarray, np.ndarray]:
    """Radix weights and a code -> action index table for allocation vectors."""
    alloc = allocation_table(config)
    radix = (config.units + 1) ** np.arange(config.n_clusters - 1, -1, -1, dtype=np.int64)
    lookup = np.full((config.units + 1) ** config.n_clusters, -1, dtype=np.int64)
    lookup[alloc @ radix] = np.arange(len(alloc))
    return radix, lookup


def rule_policy(config: DisasterConfig, rule: PriorityRule, states: np.ndarray, n_actions: int,
                _lookup: tuple[np.ndarray, np.ndarray] | None = None) -> Policy:
    radix, lookup = _lookup if _lookup is not None else _action_lookup(config)
    steps = 1 if rule.weights is not None else config.horizon
    table = np.stack([lookup[allocate(config, rule, states, h) @ radix] for h in range(steps)])
    if rule.weights is not None:
        return Policy.stationary(rule.id, table[0], config.horizon, n_actions)
    return Policy.deterministic(rule.id, table, n_actions)


def generate_disaster_policies(config: DisasterConfig, count: int, seed: int, mdp: FiniteMDP | None = None) -> PolicySet:
    """Tabular versions of :func:`generate_rules` for the reduced instance."""
    mdp = mdp if mdp is not None else build_disaster_mdp(config)
    states = state_table(config)
    rules = generate_rules(count, seed)
    lookup = _action_lookup(config)
    policies = tuple(rule_policy(config, r, states, mdp.n_actions, lookup) for r in rules)
    meta = {"generator": "disaster-priorities", "seed": seed, "count": count}
    return PolicySet(policies, meta, mdp.ref())


# --------------------------------------------------------------------------
# factored simulation for instances too large to tabulate


@dataclass
class DisasterSimulator:
    """Samples return vectors cluster by cluster, without a joint transition table."""

    config: DisasterConfig
    rules: list[PriorityRule] = field(default_factory=list)

    def reward_range(self) -> tuple[float, float]:
        cfg = self.config
        if cfg.aid_share == "horizon":
            need0 = np.array([c.initial_need for c in cfg.clusters], dtype=float)
            top = np.minimum(cfg.budget, cfg.need_cap) / need0[need0 > 0]
            U = 0.5 * float(top.max(initial=0.0)) + 0.5 / cfg.horizon
        else:
            U = 1.0
        return LOWER_BOUND_FRACTION * U, U

    def sample(self, rule: PriorityRule, n: int, seed: int) -> np.ndarray:
        """Return vectors of ``n`` episodes, shape (n, C)."""
        cfg = self.config
        L, _ = self.reward_range()
        seeds = _seeding.sample_seeds(_seeding.hash_seed(seed, rule.id), np.arange(n))
        levels = np.broadcast_to(cfg.initial_levels(), (n, cfg.n_clusters)).copy()
        G = np.zeros((n, cfg.n_clusters))
        for h in range(cfg.horizon):
            alloc = allocate(cfg, rule, levels, h)
            G += np.maximum(_rewards(cfg, levels, alloc), L)
            u = _seeding.uniforms(_seeding.split(seeds, cfg.n_clusters).ravel(), h, 1).reshape(levels.shape)
            met = alloc >= levels
            grow = u >= cfg.success_prob
            nxt = np.where(grow, np.minimum(levels + 1, cfg.levels - 1), levels - alloc)
            levels = np.where(met, 0, nxt)
        return G

    def sampler(self):
        """Adapter for ``SampledSERBackend``: (index, n, seed) -> return vectors."""
        return lambda i, n, seed: self.sample(self.rules[i], n, seed)
