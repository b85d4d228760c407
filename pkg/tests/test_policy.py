import hashlib
import json

import numpy as np
import pytest

from pmean_portfolio.envs import random_mdp, random_policies
from pmean_portfolio.policy import (
    EnumerationLimitError,
    Policy,
    PolicyError,
    PolicySchemaError,
    PolicySet,
    dumps_policy_set,
    enumerate_deterministic_policies,
    load_policy_set,
    policy_set_from_json,
    save_policy_set,
)


def mdp(S, A, H, seed=0):
    return random_mdp(S, A, 1, H, kappa=2, seed=seed)


class TestEnumeration:
    def test_counts(self):
        assert len(enumerate_deterministic_policies(mdp(1, 2, 1))) == 2
        assert len(enumerate_deterministic_policies(mdp(2, 2, 3), stationary=True)) == 4
        assert len(enumerate_deterministic_policies(mdp(2, 3, 2))) == 3 ** (2 * 2)

    def test_refuses_large_spaces(self):
        with pytest.raises(EnumerationLimitError) as exc:
            enumerate_deterministic_policies(mdp(3, 3, 3), max_count=1000)
        assert exc.value.count == 3**9

    def test_lexicographic_and_exhaustive(self):
        m = mdp(2, 2, 2)
        pset = enumerate_deterministic_policies(m)
        flat = [tuple(p.actions.ravel()) for p in pset]
        assert flat == sorted(flat) and len(set(flat)) == len(flat)
        rng = np.random.default_rng(0)
        for _ in range(50):
            table = rng.integers(0, 2, size=(2, 2))
            assert tuple(table.ravel()) in set(flat)

    def test_stationary_tables_repeat(self):
        for p in enumerate_deterministic_policies(mdp(2, 3, 4), stationary=True):
            assert np.all(p.actions == p.actions[0])


class TestPolicy:
    def test_distribution_validation(self):
        with pytest.raises(PolicyError):
            Policy.stochastic("bad", np.full((1, 1, 2), 0.6))
        with pytest.raises(PolicyError):
            Policy.deterministic("bad", [[3]], 2)

    def test_one_hot_view(self):
        p = Policy.deterministic("d", [[1, 0]], 2)
        np.testing.assert_array_equal(p.action_probs()[0], [[0, 1], [1, 0]])

    def test_duplicate_ids_rejected(self):
        p = Policy.deterministic("x", [[0]], 1)
        with pytest.raises(PolicyError):
            PolicySet((p, p))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        m = mdp(3, 2, 3)
        pset = random_policies(m, 4, seed=1)
        mixed = PolicySet(
            tuple(random_policies(m, 3, seed=1)) + (Policy.stochastic("s0", np.full((3, 3, 2), 0.5)),),
            {"generator": "test"},
            m.ref(),
        )
        for ps in (pset, mixed):
            save_policy_set(ps, tmp_path / "p.json")
            assert load_policy_set(tmp_path / "p.json") == ps

    def test_empty_set(self, tmp_path):
        empty = PolicySet((), {}, None)
        save_policy_set(empty, tmp_path / "e.json")
        assert len(load_policy_set(tmp_path / "e.json")) == 0

    def test_canonical_bytes(self):
        m = mdp(3, 3, 2)
        a = dumps_policy_set(random_policies(m, 20, seed=5, stochastic=True))
        b = dumps_policy_set(random_policies(m, 20, seed=5, stochastic=True))
        assert hashlib.sha256(a.encode()).digest() == hashlib.sha256(b.encode()).digest()
        again = dumps_policy_set(policy_set_from_json(json.loads(a)))
        assert again == a

    def test_schema_errors_carry_pointer(self):
        m = mdp(2, 2, 1)
        doc = json.loads(dumps_policy_set(random_policies(m, 2, seed=0)))
        doc["policies"][1]["kind"] = "fuzzy"
        with pytest.raises(PolicySchemaError) as exc:
            policy_set_from_json(doc)
        assert exc.value.pointer == "/policies/1/kind"
        doc["policies"][1]["kind"] = "deterministic"
        doc["policies"][0]["table"] = {"9,1": 0}
        with pytest.raises(PolicySchemaError) as exc:
            policy_set_from_json(doc)
        assert exc.value.pointer == "/policies/0/table/9,1"

    def test_undefined_pairs_survive(self):
        table = np.array([[0, -1], [1, 1]])
        ps = PolicySet((Policy.deterministic("h", table, 2),))
        back = policy_set_from_json(json.loads(dumps_policy_set(ps)))
        np.testing.assert_array_equal(back[0].actions, table)
