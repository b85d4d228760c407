"""Seeded random instances for property tests and smoke runs."""

from __future__ import annotations

import numpy as np

from ..mdp import FiniteMDP
from ..policy import Policy, PolicySet


def random_mdp(
    n_states: int,
    n_actions: int,
    n_rewards: int,
    horizon: int,
    kappa: float = 10.0,
    seed: int = 0,
    sparsity: float = 0.0,
) -> FiniteMDP:
    """Dense random transitions and rewards uniform on [1/kappa, 1].

    With ``sparsity > 0`` each successor is dropped with that probability
    (one is always kept), which keeps trajectory enumeration cheap.
    """
    if min(n_states, n_actions, n_rewards, horizon) < 1:
        raise ValueError("sizes must be >= 1")
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    rng = np.random.default_rng(seed)
    T = rng.random((n_states, n_actions, n_states)) + 1e-3
    if sparsity > 0:
        keep = rng.random(T.shape) >= sparsity
        keep[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], rng.integers(0, n_states, (n_states, n_actions))] = True
        T = T * keep
    T /= T.sum(axis=2, keepdims=True)
    U, L = 1.0, 1.0 / kappa
    R = rng.uniform(L, U, size=(n_rewards, n_states, n_actions))
    return FiniteMDP(T, R, horizon, 0, L, U, name=f"random-{seed}")


def random_policies(mdp: FiniteMDP, count: int, seed: int = 0, stochastic: bool = False) -> PolicySet:
    """``count`` random time-dependent policies (deterministic unless ``stochastic``)."""
    rng = np.random.default_rng(seed)
    shape = (mdp.horizon, mdp.n_states)
    out = []
    width = len(str(max(count - 1, 0)))
    for i in range(count):
        pid = f"rand-{i:0{width}d}"
        if stochastic:
            probs = rng.dirichlet(np.ones(mdp.n_actions), size=shape)
            out.append(Policy.stochastic(pid, probs))
        else:
            out.append(Policy.deterministic(pid, rng.integers(0, mdp.n_actions, size=shape), mdp.n_actions))
    return PolicySet(tuple(out), {"generator": "random", "seed": seed}, mdp.ref())
