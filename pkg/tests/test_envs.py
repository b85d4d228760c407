import hashlib

import numpy as np
import pytest

from pmean_portfolio.envs import (
    DisasterConfig,
    DisasterSimulator,
    EnvironmentSizeError,
    build_disaster_mdp,
    feasible_actions,
    generate_disaster_policies,
    generate_rules,
    load_clusters,
    random_mdp,
)
from pmean_portfolio.envs.disaster import (
    ClusterSpec,
    PriorityRule,
    allocate,
    allocation_table,
    cluster_kernel,
    state_table,
)
from pmean_portfolio.mdp import condition_number, expected_return_vector, ser_value
from pmean_portfolio.policy import dumps_policy_set


@pytest.fixture(scope="module")
def small():
    cfg = DisasterConfig.reduced((10, 11), horizon=3)
    return cfg, build_disaster_mdp(cfg)


@pytest.fixture(scope="module")
def reduced():
    cfg = DisasterConfig.reduced()
    return cfg, build_disaster_mdp(cfg)


def test_bundled_table():
    clusters = load_clusters()
    assert len(clusters) == 12
    assert clusters[0] == ClusterSpec(1, "High", "Far", "High", 148, 150)
    assert clusters[5] == ClusterSpec(6, "High", "Near", "Middle", 2782, 950)
    assert clusters[11] == ClusterSpec(12, "Low", "Near", "Middle", 230, 100)
    assert sum(c.population for c in clusters) == 7126
    assert sum(c.initial_need for c in clusters) == 5450


def test_config_validation():
    with pytest.raises(ValueError):
        DisasterConfig.reduced(success_prob=0.6)
    with pytest.raises(ValueError):
        DisasterConfig.reduced(increment=40)
    cfg = DisasterConfig.reduced()
    assert DisasterConfig.from_json(cfg.to_json()) == cfg


class TestDynamics:
    def test_single_cluster_rule(self):
        M = cluster_kernel(DisasterConfig.reduced())
        # need 100 (level 2)
        np.testing.assert_array_equal(M[2, 2], [1.0, 0, 0, 0])
        np.testing.assert_allclose(M[2, 1], [0, 0.7, 0, 0.3])

    def test_rows_sum_to_one(self, reduced):
        _, mdp = reduced
        assert np.abs(mdp.transition.sum(axis=2) - 1).max() <= 1e-9

    def test_joint_kernel_marginals(self, small):
        cfg, mdp = small
        states, alloc, M = state_table(cfg), allocation_table(cfg), cluster_kernel(cfg)
        for c in range(cfg.n_clusters):
            onehot = np.eye(cfg.levels)[states[:, c]]  # (S', L)
            marg = mdp.transition @ onehot  # (S, A, L)
            expected = M[states[:, c][:, None], alloc[:, c][None, :]]
            np.testing.assert_allclose(marg, expected, atol=1e-12)

    def test_actions_within_budget(self, reduced):
        cfg, mdp = reduced
        alloc = allocation_table(cfg)
        assert len(alloc) == mdp.n_actions == 35
        assert alloc.sum(axis=1).max() * cfg.increment <= cfg.budget

    def test_zero_need_excluded(self, reduced):
        cfg, _ = reduced
        acts = feasible_actions(cfg, [0, 2, 0, 1])
        assert np.all(allocation_table(cfg)[acts][:, [0, 2]] == 0)

    def test_rewards_and_condition_number(self, reduced):
        cfg, mdp = reduced
        assert condition_number(mdp) == pytest.approx(1000.0)
        assert mdp.n_rewards == 4 and mdp.horizon == 4
        assert mdp.state_labels[mdp.initial_state] == "150/150/150/100"

    def test_size_cap(self):
        with pytest.raises(EnvironmentSizeError) as exc:
            build_disaster_mdp(DisasterConfig.full())
        assert exc.value.n_states == 4**12


class TestPolicies:
    def test_six_pure(self, small):
        cfg, mdp = small
        ps = generate_disaster_policies(cfg, 6, seed=0, mdp=mdp)
        assert [p.id for p in ps] == [r.id for r in generate_rules(6, 0)]
        assert all(p.id.startswith("priority-") for p in ps)

    def test_highest_need_toy(self):
        clusters = (ClusterSpec(1, "Low", "Near", "Low", 10, 100), ClusterSpec(2, "Low", "Near", "Low", 10, 50))
        cfg = DisasterConfig(clusters, budget=50, need_cap=100, horizon=1)
        rule = [r for r in generate_rules(6, 0) if r.id == "priority-highest-unmet-need"][0]
        np.testing.assert_array_equal(allocate(cfg, rule, np.array([[2, 1]]), 0), [[1, 0]])

    def test_feasible(self, reduced):
        cfg, mdp = reduced
        ps = generate_disaster_policies(cfg, 60, seed=3, mdp=mdp)
        alloc, states = allocation_table(cfg), state_table(cfg)
        for pol in ps:
            given = alloc[pol.actions]  # (H, S, C)
            assert not np.any((given > 0) & (states[None] == 0))
            assert np.all(given.sum(axis=2) <= np.minimum(states.sum(axis=1), cfg.units)[None])

    def test_byte_identical(self, reduced):
        cfg, mdp = reduced
        digests = {
            hashlib.sha256(dumps_policy_set(generate_disaster_policies(cfg, 40, seed=7, mdp=mdp)).encode()).hexdigest()
            for _ in range(2)
        }
        assert len(digests) == 1

    def test_value_monotone_in_p(self, reduced):
        cfg, mdp = reduced
        pol = generate_disaster_policies(cfg, 8, seed=1, mdp=mdp)[7]
        vals = [ser_value(mdp, pol, p) for p in np.linspace(-100, 1, 100)]
        assert np.all(np.diff(vals) >= -1e-9 * np.array(vals[1:]))


def test_simulator_matches_exact_evaluation(reduced):
    cfg, mdp = reduced
    rules = generate_rules(10, seed=2)
    ps = generate_disaster_policies(cfg, 10, seed=2, mdp=mdp)
    sim = DisasterSimulator(cfg, rules)
    for i in (1, 6, 9):
        G = sim.sample(rules[i], 40_000, seed=5)
        mean, se = G.mean(axis=0), G.std(axis=0, ddof=1) / np.sqrt(len(G))
        exact = expected_return_vector(mdp, ps[i])
        assert np.all(np.abs(mean - exact) <= 4 * se + 1e-12)


class TestRandomMDP:
    def test_flat_rewards(self):
        m = random_mdp(3, 2, 2, 2, kappa=1.0, seed=1)
        assert np.all(m.rewards == m.rewards.flat[0])

    def test_rows(self):
        m = random_mdp(5, 3, 2, 2, seed=2, sparsity=0.5)
        assert np.abs(m.transition.sum(axis=2) - 1).max() <= 1e-12

    def test_seeds_differ(self):
        h = {hashlib.sha256(random_mdp(3, 2, 2, 2, seed=s).rewards.tobytes()).hexdigest() for s in range(5)}
        assert len(h) == 5
