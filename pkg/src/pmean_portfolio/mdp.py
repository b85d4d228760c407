"""Finite-horizon MDPs with one reward table per stakeholder, and policy evaluation.

Scalarized expected returns are computed exactly by propagating the state
occupancy distribution. Expected scalarized returns are computed either by
enumerating every trajectory or by Monte Carlo with counter-based seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import _seeding
from ._parallel import ordered_map
from .policy import UNDEFINED, Policy
from .welfare import PLike, as_pvalue, p_mean, p_mean_rows

ROW_TOL = 1e-9
DEFAULT_PATH_CAP = 1_000_000
LOWER_BOUND_FRACTION = 1e-3
_MC_BATCH = 8192


class MDPError(ValueError):
    pass


class RewardBoundsError(MDPError):
    pass


class PolicyEvaluationError(RuntimeError):
    """The policy has no action distribution at a reachable (state, step)."""

    def __init__(self, policy_id: str, state: int, step: int):
        super().__init__(f"policy {policy_id!r} is undefined at state {state}, step {step}")
        self.state = state
        self.step = step


class PathCapExceeded(RuntimeError):
    def __init__(self, count: float, cap: int):
        super().__init__(f"trajectory space has ~{count:.6g} paths, above the cap of {cap}")
        self.count = count
        self.cap = cap


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FiniteMDP:
    """Finite-horizon MDP with ``N`` reward functions bounded in ``[L, U]``.

    ``transition`` has shape (S, A, S) and ``rewards`` shape (N, S, A). The
    constructor validates strictly; use :meth:`from_tables` to clamp reward
    entries that fall below the declared lower bound.
    """

    transition: np.ndarray
    rewards: np.ndarray
    horizon: int
    initial_state: int
    reward_lower: float
    reward_upper: float
    state_labels: tuple[str, ...] = ()
    action_labels: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self) -> None:
        T = _readonly(self.transition)
        R = _readonly(self.rewards)
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise MDPError(f"transition must have shape (S, A, S), got {T.shape}")
        S, A = T.shape[0], T.shape[1]
        if R.ndim != 3 or R.shape[1:] != (S, A) or R.shape[0] < 1:
            raise MDPError(f"rewards must have shape (N, {S}, {A}), got {R.shape}")
        if np.any(T < 0):
            raise MDPError("transition has negative mass")
        sums = T.sum(axis=2)
        if np.any(np.abs(sums - 1.0) > ROW_TOL):
            s, a = np.argwhere(np.abs(sums - 1.0) > ROW_TOL)[0]
            raise MDPError(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise MDPError("horizon must be a positive integer")
        if not 0 <= self.initial_state < S:
            raise MDPError(f"initial_state {self.initial_state} out of range")
        L, U = float(self.reward_lower), float(self.reward_upper)
        if not (L > 0 and U >= L and math.isfinite(U)):
            raise RewardBoundsError(f"reward bounds must satisfy 0 < L <= U, got [{L}, {U}]")
        violations = bound_violations(R, L, U)
        if violations:
            i, s, a, v = violations[0]
            raise RewardBoundsError(
                f"{len(violations)} reward entries outside [{L}, {U}], e.g. R_{i}(s={s}, a={a}) = {v}"
            )
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "initial_state", int(self.initial_state))
        object.__setattr__(self, "reward_lower", L)
        object.__setattr__(self, "reward_upper", U)
        labels = tuple(self.state_labels) or tuple(str(s) for s in range(S))
        alabels = tuple(self.action_labels) or tuple(str(a) for a in range(A))
        if len(labels) != S or len(alabels) != A:
            raise MDPError("label counts must match the state and action counts")
        object.__setattr__(self, "state_labels", labels)
        object.__setattr__(self, "action_labels", alabels)

    @classmethod
    def from_tables(
        cls,
        transition,
        rewards,
        horizon: int,
        initial_state: int = 0,
        reward_bounds: Sequence[float] | None = None,
        **kwargs: Any,
    ) -> FiniteMDP:
        """Build an MDP, clamping reward entries below ``L`` up to ``L``.

        Missing bounds default to ``U = max reward`` and ``L = 1e-3 * U``.
        Entries above ``U`` are an error.
        """
        R = np.array(rewards, dtype=float)
        if reward_bounds is None:
            U = float(R.max())
            L = LOWER_BOUND_FRACTION * U
        else:
            L, U = (float(v) for v in reward_bounds)
        if not L > 0:
            raise RewardBoundsError(f"lower reward bound must be positive, got {L}")
        low = R < L
        if np.any(low):
            warnings.warn(
                f"clamping {int(low.sum())} reward entries below L={L:g} up to L", stacklevel=2
            )
            R = np.where(low, L, R)
        return cls(transition, R, horizon, initial_state, L, U, **kwargs)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_rewards(self) -> int:
        return self.rewards.shape[0]

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "states": list(self.state_labels),
            "actions": list(self.action_labels),
            "transition": self.transition.tolist(),
            "rewards": self.rewards.tolist(),
            "horizon": self.horizon,
            "initial_state": self.initial_state,
            "reward_bounds": [self.reward_lower, self.reward_upper],
        }

    def ref(self) -> str:
        """Content hash used to tie policy sets to an MDP."""
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def bound_violations(rewards, lower: float, upper: float) -> list[tuple[int, int, int, float]]:
    """Reward entries outside ``[lower, upper]`` as (i, s, a, value)."""
    R = np.asarray(rewards, dtype=float)
    bad = np.argwhere((R < lower) | (R > upper))
    return [(int(i), int(s), int(a), float(R[i, s, a])) for i, s, a in bad]


def condition_number(mdp: FiniteMDP) -> float:
    return mdp.reward_upper / mdp.reward_lower


def mdp_from_json(doc: dict[str, Any]) -> FiniteMDP:
    required = ("transition", "rewards", "horizon", "initial_state")
    missing = [k for k in required if k not in doc]
    if missing:
        raise MDPError(f"MDP document missing keys: {missing}")
    T = np.asarray(doc["transition"], dtype=float)
    if T.ndim == 3:
        sums = T.sum(axis=2)
        off = np.abs(sums - 1.0) > ROW_TOL
        if np.any(off):
            s, a = np.argwhere(off)[0]
            raise MDPError(f"/transition/{s}/{a}: row sums to {sums[s, a]!r}")
    return FiniteMDP.from_tables(
        T,
        doc["rewards"],
        doc["horizon"],
        doc["initial_state"],
        doc.get("reward_bounds"),
        state_labels=tuple(str(s) for s in doc.get("states", ())),
        action_labels=tuple(str(a) for a in doc.get("actions", ())),
        name=doc.get("name", ""),
    )


def save_mdp(mdp: FiniteMDP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def load_mdp(path: str | Path) -> FiniteMDP:
    return mdp_from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    states: tuple[int, ...]
    actions: tuple[int, ...]
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int]]:
        return list(zip(self.states, self.actions))


def _categorical(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(rows, axis=1)
    target = u * cdf[:, -1]
    idx = (cdf <= target[:, None]).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def _simulate_batch(mdp: FiniteMDP, policy: Policy, seeds: np.ndarray, record: bool = False):
    n = len(seeds)
    states = np.full(n, mdp.initial_state, dtype=np.int64)
    G = np.zeros((n, mdp.n_rewards))
    hist_s, hist_a = [], []
    for h in range(mdp.horizon):
        if policy.actions is not None:
            acts = policy.actions[h, states].astype(np.int64)
            undefined = acts == UNDEFINED
        else:
            rows = policy.probs[h, states]
            undefined = rows.sum(axis=1) == 0
            acts = _categorical(rows, _seeding.uniforms(seeds, h, _seeding.ACTION_STREAM))
        if np.any(undefined):
            raise PolicyEvaluationError(policy.id, int(states[np.argmax(undefined)]), h + 1)
        G += mdp.rewards[:, states, acts].T
        if record:
            hist_s.append(states.copy())
            hist_a.append(acts.copy())
        if h + 1 < mdp.horizon:
            rows = mdp.transition[states, acts]
            states = _categorical(rows, _seeding.uniforms(seeds, h, _seeding.TRANSITION_STREAM))
    return G, hist_s, hist_a


def simulate(mdp: FiniteMDP, policy: Policy, seed: int) -> Trajectory:
    """Sample one trajectory; the result depends only on (mdp, policy, seed)."""
    seeds = np.array([seed & ((1 << 64) - 1)], dtype=np.uint64)
    _, hs, ha = _simulate_batch(mdp, policy, seeds, record=True)
    return Trajectory(tuple(int(s[0]) for s in hs), tuple(int(a[0]) for a in ha), seed)


def return_vector(mdp: FiniteMDP, trajectory: Trajectory) -> np.ndarray:
    """Total reward per stakeholder along ``trajectory``."""
    s = np.asarray(trajectory.states, dtype=np.int64)
    a = np.asarray(trajectory.actions, dtype=np.int64)
    if len(s) != mdp.horizon or len(a) != mdp.horizon:
        raise MDPError(f"trajectory length {len(s)} does not match horizon {mdp.horizon}")
    return mdp.rewards[:, s, a].sum(axis=1)


def mc_sample_seeds(master_seed: int, policy_id: str, p_key: str, n_samples: int) -> np.ndarray:
    """Seeds for samples ``0..n-1`` of one (policy, p) estimate."""
    base = _seeding.hash_seed(master_seed, policy_id, p_key)
    return _seeding.sample_seeds(base, np.arange(n_samples))


def sample_return_vectors(mdp: FiniteMDP, policy: Policy, seeds: np.ndarray) -> np.ndarray:
    """Return vectors of the trajectories started from each seed, shape (n, N)."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    out = [_simulate_batch(mdp, policy, seeds[i : i + _MC_BATCH])[0] for i in range(0, len(seeds), _MC_BATCH)]
    return np.concatenate(out) if out else np.zeros((0, mdp.n_rewards))


# --------------------------------------------------------------------------
# exact evaluation


def expected_return_vector(mdp: FiniteMDP, policy: Policy) -> np.ndarray:
    """Exact E[G(tau)] by forward propagation of the state distribution."""
    S = mdp.n_states
    d = np.zeros(S)
    d[mdp.initial_state] = 1.0
    G = np.zeros(mdp.n_rewards)
    for h in range(mdp.horizon):
        support = np.nonzero(d)[0]
        if policy.actions is not None:
            acts = policy.actions[h, support]
            if np.any(acts == UNDEFINED):
                raise PolicyEvaluationError(policy.id, int(support[np.argmax(acts == UNDEFINED)]), h + 1)
            w = d[support]
            G += mdp.rewards[:, support, acts] @ w
            if h + 1 < mdp.horizon:
                d = w @ mdp.transition[support, acts]
        else:
            probs = policy.probs[h, support]
            if np.any(probs.sum(axis=1) == 0):
                raise PolicyEvaluationError(policy.id, int(support[np.argmax(probs.sum(axis=1) == 0)]), h + 1)
            x = d[support, None] * probs
            G += np.einsum("nsa,sa->n", mdp.rewards[:, support, :], x)
            if h + 1 < mdp.horizon:
                d = np.einsum("sa,sat->t", x, mdp.transition[support])
    return G


def expected_return_matrix(mdp: FiniteMDP, policies: Sequence[Policy]) -> np.ndarray:
    """Expected return vectors of many policies, shape (len(policies), N)."""
    if len(policies) == 0:
        return np.zeros((0, mdp.n_rewards))
    chunk = max(1, math.ceil(len(policies) / 64))
    blocks = [policies[i : i + chunk] for i in range(0, len(policies), chunk)]
    rows = ordered_map(lambda blk: [expected_return_vector(mdp, p) for p in blk], blocks)
    return np.array([r for blk in rows for r in blk])


def ser_value(mdp: FiniteMDP, policy: Policy, p: PLike) -> float:
    """Scalarized expected returns f(E[G], p)."""
    return p_mean(expected_return_vector(mdp, policy), p)


def path_count(mdp: FiniteMDP, policy: Policy) -> float:
    """Number of positive-probability trajectories (as a float; may be huge)."""
    c = np.zeros(mdp.n_states)
    c[mdp.initial_state] = 1.0
    reach = mdp.transition > 0
    probs = policy.action_probs() > 0
    total = 0.0
    for h in range(mdp.horizon):
        ca = c[:, None] * probs[h]
        total = float(ca.sum())
        if h + 1 < mdp.horizon:
            c = np.einsum("sa,sat->t", ca, reach)
    return total


@dataclass(frozen=True)
class ReturnDistribution:
    """Exact distribution of G(tau): one row of ``returns`` per trajectory."""

    probs: np.ndarray
    returns: np.ndarray

    def esr(self, p: PLike) -> float:
        vals = p_mean_rows(self.returns, p)
        return float(self.probs @ vals)

    def mean(self) -> np.ndarray:
        return self.probs @ self.returns


def return_distribution(mdp: FiniteMDP, policy: Policy, path_cap: int = DEFAULT_PATH_CAP) -> ReturnDistribution:
    """Enumerate every trajectory with its probability and return vector."""
    count = path_count(mdp, policy)
    if count > path_cap:
        raise PathCapExceeded(count, path_cap)
    states = np.array([mdp.initial_state])
    prob = np.ones(1)
    G = np.zeros((1, mdp.n_rewards))
    table = policy.action_probs()
    for h in range(mdp.horizon):
        pa = table[h, states]
        if np.any(pa.sum(axis=1) == 0):
            raise PolicyEvaluationError(policy.id, int(states[np.argmax(pa.sum(axis=1) == 0)]), h + 1)
        i, a = np.nonzero(pa)
        states, prob = states[i], prob[i] * pa[i, a]
        G = G[i] + mdp.rewards[:, states, a].T
        if h + 1 < mdp.horizon:
            nxt = mdp.transition[states, a]
            j, s2 = np.nonzero(nxt)
            prob = prob[j] * nxt[j, s2]
            G = G[j]
            states = s2
    return ReturnDistribution(prob, G)


def esr_value_exact(mdp: FiniteMDP, policy: Policy, p: PLike, path_cap: int = DEFAULT_PATH_CAP) -> float:
    """Expected scalarized returns E[f(G, p)] by trajectory enumeration."""
    return return_distribution(mdp, policy, path_cap).esr(p)


def esr_value_mc(
    mdp: FiniteMDP, policy: Policy, p: PLike, n_samples: int, seed: int
) -> tuple[float, float]:
    """Monte Carlo estimate of E[f(G, p)] and its standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pv = as_pvalue(p)
    seeds = mc_sample_seeds(seed, policy.id, pv.key, n_samples)
    G = sample_return_vectors(mdp, policy, seeds)
    vals = p_mean_rows(G, pv)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
    return est, se
