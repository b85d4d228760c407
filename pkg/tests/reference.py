"""Slow, independent reference computations used as test oracles.

Nothing here imports the evaluation code under test; the MDP is read only
through its public arrays.
"""

from __future__ import annotations

import itertools
import math

import mpmath as mp

mp.mp.dps = 50


def mp_p_mean(x, p) -> mp.mpf:
    """Generalized mean in arbitrary precision; ``p`` may be float('-inf')."""
    xs = [mp.mpf(v) for v in x]
    n = len(xs)
    if p == -math.inf:
        return min(xs)
    if p == 0:
        return mp.exp(sum(mp.log(v) for v in xs) / n)
    p = mp.mpf(p)
    logs = [mp.log(v) for v in xs]
    if abs(p) * max(abs(v) for v in logs) < 1:
        # mean(x^p) - 1 via expm1 keeps full precision for tiny |p|
        m1 = sum(mp.expm1(p * v) for v in logs) / n
        return mp.exp(mp.log1p(m1) / p)
    return (sum(v**p for v in xs) / n) ** (1 / p)


def enumerate_trajectories(mdp, action_prob):
    """Every (probability, return vector) pair by recursion over steps.

    ``action_prob(h, s)`` returns a sequence of action probabilities.
    """
    out = []
    N = mdp.rewards.shape[0]

    def walk(h, s, prob, G):
        probs = action_prob(h, s)
        for a, pa in enumerate(probs):
            if pa == 0:
                continue
            G2 = [G[i] + float(mdp.rewards[i, s, a]) for i in range(N)]
            if h + 1 == mdp.horizon:
                out.append((prob * pa, G2))
                continue
            for s2 in range(mdp.n_states):
                pt = float(mdp.transition[s, a, s2])
                if pt > 0:
                    walk(h + 1, s2, prob * pa * pt, G2)

    walk(0, mdp.initial_state, 1.0, [0.0] * N)
    return out


def policy_action_prob(policy):
    def fn(h, s):
        if policy.actions is not None:
            a = int(policy.actions[h, s])
            return [1.0 if k == a else 0.0 for k in range(policy.n_actions)]
        return [float(v) for v in policy.probs[h, s]]

    return fn


def brute_expected_return(mdp, policy):
    paths = enumerate_trajectories(mdp, policy_action_prob(policy))
    N = mdp.rewards.shape[0]
    return [math.fsum(pr * G[i] for pr, G in paths) for i in range(N)]


def brute_esr(mdp, policy, p):
    paths = enumerate_trajectories(mdp, policy_action_prob(policy))
    return float(mp.fsum(mp.mpf(pr) * mp_p_mean(G, p) for pr, G in paths))


def all_action_sequences(mdp):
    """Deterministic open-loop action sequences, as a cross-check on counts."""
    return itertools.product(range(mdp.n_actions), repeat=mdp.horizon)
