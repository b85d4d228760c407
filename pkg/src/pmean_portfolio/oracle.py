"""Welfare-maximization oracles over a finite policy class.

An :class:`Oracle` answers two kinds of query:

* ``solve(p)``: the best policy at ``p`` and its value. Each distinct ``p``
  solved is one oracle call; repeating a solve replays the recorded result.
* ``evaluate(policy_id, p)``: one policy's value. This is a point evaluation,
  not an oracle call.

Values are cached in a :class:`PolicyEvaluator` that several oracles may share
(see :meth:`Oracle.fork`), so evaluation grids and baselines do not redo work
while every algorithm run still gets its own call ledger.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._parallel import ordered_map
from .mdp import (
    DEFAULT_PATH_CAP,
    FiniteMDP,
    condition_number,
    esr_value_mc,
    expected_return_matrix,
    return_distribution,
)
from .policy import PolicySet, check_compatible, enumerate_deterministic_policies
from .welfare import PLike, PValue, as_pvalue, p_mean_rows, slope_bound

SER = "ser"
ESR = "esr"


class OracleConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# value backends


class ReturnVectorsBackend:
    """SER values from a fixed matrix of expected return vectors (one row per policy)."""

    exact = True

    def __init__(self, vectors, ids: Sequence[str]):
        self._vectors = np.asarray(vectors, dtype=float)
        self.ids = list(ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def values(self, p: PValue) -> tuple[np.ndarray, np.ndarray]:
        v = p_mean_rows(self.vectors, p)
        return v, np.zeros_like(v)

    def value(self, index: int, p: PValue) -> tuple[float, float]:
        return float(p_mean_rows(self.vectors[index : index + 1], p)[0]), 0.0


class SERBackend(ReturnVectorsBackend):
    """Exact SER for tabular policies; expected returns are computed once, on first use."""

    def __init__(self, mdp: FiniteMDP, policies: PolicySet):
        self.mdp = mdp
        self.policies = policies
        self.ids = policies.ids
        self._vectors = None
        self._lock = threading.Lock()

    @property
    def vectors(self) -> np.ndarray:
        with self._lock:
            if self._vectors is None:
                self._vectors = expected_return_matrix(self.mdp, self.policies.policies)
            return self._vectors


class ESRExactBackend:
    """Exact ESR from enumerated trajectory distributions (cached per policy)."""

    exact = True

    def __init__(self, mdp: FiniteMDP, policies: PolicySet, path_cap: int = DEFAULT_PATH_CAP):
        self.mdp = mdp
        self.policies = policies
        self.ids = policies.ids
        self.path_cap = path_cap
        self._dists: dict[int, object] = {}
        self._lock = threading.Lock()

    def _dist(self, index: int):
        with self._lock:
            dist = self._dists.get(index)
        if dist is None:
            dist = return_distribution(self.mdp, self.policies[index], self.path_cap)
            with self._lock:
                self._dists.setdefault(index, dist)
        return dist

    def value(self, index: int, p: PValue) -> tuple[float, float]:
        return self._dist(index).esr(p), 0.0

    def values(self, p: PValue) -> tuple[np.ndarray, np.ndarray]:
        vals = ordered_map(lambda i: self.value(i, p)[0], range(len(self.ids)))
        return np.array(vals), np.zeros(len(vals))


class ESRMonteCarloBackend:
    """Monte Carlo ESR; each (policy, p) pair uses its own derived sample seeds."""

    exact = False

    def __init__(self, mdp: FiniteMDP, policies: PolicySet, n_samples: int, seed: int):
        if n_samples < 1:
            raise OracleConfigError("n_samples must be >= 1")
        self.mdp = mdp
        self.policies = policies
        self.ids = policies.ids
        self.n_samples = n_samples
        self.seed = seed

    def value(self, index: int, p: PValue) -> tuple[float, float]:
        return esr_value_mc(self.mdp, self.policies[index], p, self.n_samples, self.seed)

    def values(self, p: PValue) -> tuple[np.ndarray, np.ndarray]:
        pairs = ordered_map(lambda i: self.value(i, p), range(len(self.ids)))
        arr = np.array(pairs).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]


class SampledSERBackend(ReturnVectorsBackend):
    """SER with expected returns estimated by simulation.

    ``sampler(index, n_samples, seed)`` must return an (n_samples, N) array of
    return vectors for policy ``index``. The mean vector of each policy is
    estimated once and reused for every ``p``.
    """

    exact = False

    def __init__(self, ids: Sequence[str], sampler: Callable[[int, int, int], np.ndarray], n_samples: int, seed: int):
        self.ids = list(ids)
        self.sampler = sampler
        self.n_samples = n_samples
        self.seed = seed
        self._vectors = None
        self._lock = threading.Lock()

    @property
    def vectors(self) -> np.ndarray:
        with self._lock:
            if self._vectors is None:
                rows = ordered_map(
                    lambda i: self.sampler(i, self.n_samples, self.seed).mean(axis=0), range(len(self.ids))
                )
                self._vectors = np.array(rows)
            return self._vectors


class PolicyEvaluator:
    """Thread-safe value cache keyed by (policy index, canonical p)."""

    def __init__(self, backend):
        self.backend = backend
        self.ids: list[str] = list(backend.ids)
        self._index = {pid: i for i, pid in enumerate(self.ids)}
        self._full: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._single: dict[tuple[int, str], tuple[float, float]] = {}
        self._lock = threading.Lock()
        # number of single-policy value computations (cache misses)
        self.computations = 0

    def index_of(self, policy_id: str) -> int:
        try:
            return self._index[policy_id]
        except KeyError:
            raise KeyError(f"unknown policy id {policy_id!r}") from None

    def all_values(self, p: PValue) -> tuple[np.ndarray, np.ndarray]:
        with self._lock:
            hit = self._full.get(p.key)
        if hit is not None:
            return hit
        vals, ses = self.backend.values(p)
        vals = np.asarray(vals, dtype=float)
        ses = np.asarray(ses, dtype=float)
        vals.setflags(write=False)
        ses.setflags(write=False)
        with self._lock:
            if p.key not in self._full:
                self._full[p.key] = (vals, ses)
                self.computations += len(vals)
            return self._full[p.key]

    def value(self, index: int, p: PValue) -> tuple[float, float]:
        with self._lock:
            full = self._full.get(p.key)
            if full is not None:
                return float(full[0][index]), float(full[1][index])
            hit = self._single.get((index, p.key))
        if hit is not None:
            return hit
        res = self.backend.value(index, p)
        res = (float(res[0]), float(res[1]))
        with self._lock:
            if (index, p.key) not in self._single:
                self._single[(index, p.key)] = res
                self.computations += 1
            return self._single[(index, p.key)]


# --------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class OracleResult:
    p: PValue
    best_policy_id: str
    best_index: int
    best_value: float
    evaluations_performed: int
    stderr: float = 0.0


@dataclass
class CallRecord:
    call: int
    p: PValue
    best_policy_id: str
    best_value: float

    def to_json(self) -> dict:
        return {"call": self.call, "p": self.p.to_json(), "best_policy_id": self.best_policy_id,
                "best_value": self.best_value}


@dataclass
class CallLedger:
    oracle_calls: int = 0
    point_evaluations: int = 0
    records: list[CallRecord] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [r.to_json() for r in self.records]


class Oracle:
    """Solves ``max over policies of v(pi, p)`` on a finite policy class.

    ``stderr_margin`` (k) is read by the portfolio algorithms: with Monte Carlo
    values they only accept a comparison when it holds with k standard errors
    to spare. It defaults to 0, i.e. point estimates are compared directly.
    """

    def __init__(
        self,
        evaluator: PolicyEvaluator,
        rule: str = SER,
        mdp: FiniteMDP | None = None,
        n_rewards: int | None = None,
        kappa: float | None = None,
        stderr_margin: float = 0.0,
        description: str = "",
    ):
        if not evaluator.ids:
            raise OracleConfigError("policy class is empty")
        self.evaluator = evaluator
        self.rule = rule
        self.mdp = mdp
        self.n_rewards = n_rewards if n_rewards is not None else (mdp.n_rewards if mdp else None)
        self.kappa = kappa if kappa is not None else (condition_number(mdp) if mdp else None)
        self.stderr_margin = stderr_margin
        self.description = description
        self.ledger = CallLedger()
        self._solved: dict[str, OracleResult] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def for_policy_set(
        cls,
        mdp: FiniteMDP,
        policies: PolicySet,
        rule: str = SER,
        esr_mode: str = "exact",
        n_samples: int = 1000,
        seed: int = 0,
        path_cap: int = DEFAULT_PATH_CAP,
        stderr_margin: float = 0.0,
    ) -> Oracle:
        check_compatible(policies, mdp)
        if rule == SER:
            backend = SERBackend(mdp, policies)
        elif rule == ESR and esr_mode == "exact":
            backend = ESRExactBackend(mdp, policies, path_cap)
        elif rule == ESR and esr_mode == "mc":
            backend = ESRMonteCarloBackend(mdp, policies, n_samples, seed)
        else:
            raise OracleConfigError(f"unsupported rule/mode {rule!r}/{esr_mode!r}")
        desc = f"finite-set/{rule}" + (f"/{esr_mode}" if rule == ESR else "")
        return cls(PolicyEvaluator(backend), rule, mdp, stderr_margin=stderr_margin, description=desc)

    @classmethod
    def exhaustive(
        cls,
        mdp: FiniteMDP,
        rule: str = SER,
        stationary: bool = False,
        max_count: int = 100_000,
        **kwargs,
    ) -> Oracle:
        """Oracle over every deterministic policy of a small MDP."""
        pset = enumerate_deterministic_policies(mdp, max_count=max_count, stationary=stationary)
        oracle = cls.for_policy_set(mdp, pset, rule=rule, **kwargs)
        oracle.description = "exhaustive/" + oracle.description.split("/", 1)[1]
        return oracle

    @classmethod
    def from_return_vectors(cls, vectors, ids: Sequence[str] | None = None, kappa: float | None = None) -> Oracle:
        """SER oracle over policies given directly by their expected return vectors."""
        vectors = np.asarray(vectors, dtype=float)
        if ids is None:
            ids = [f"pi{i}" for i in range(len(vectors))]
        if kappa is None and vectors.size:
            kappa = float(vectors.max() / vectors.min())
        n = vectors.shape[1] if vectors.ndim == 2 else None
        return cls(PolicyEvaluator(ReturnVectorsBackend(vectors, ids)), SER, n_rewards=n, kappa=kappa,
                   description="return-vectors/ser")

    def fork(self) -> Oracle:
        """A new oracle sharing this one's value cache but with an empty ledger."""
        return Oracle(self.evaluator, self.rule, self.mdp, self.n_rewards, self.kappa,
                      self.stderr_margin, self.description)

    # -- queries ------------------------------------------------------------

    @property
    def policy_ids(self) -> list[str]:
        return self.evaluator.ids

    @property
    def exact(self) -> bool:
        return bool(getattr(self.evaluator.backend, "exact", True))

    def solve(self, p: PLike) -> OracleResult:
        pv = as_pvalue(p)
        hit = self._solved.get(pv.key)
        if hit is not None:
            return hit
        before = self.evaluator.computations
        vals, ses = self.evaluator.all_values(pv)
        best = int(np.argmax(vals))  # first maximum: lowest index wins ties
        self.ledger.oracle_calls += 1
        res = OracleResult(pv, self.policy_ids[best], best, float(vals[best]),
                           self.evaluator.computations - before, float(ses[best]))
        self._solved[pv.key] = res
        self.ledger.records.append(CallRecord(self.ledger.oracle_calls, pv, res.best_policy_id, res.best_value))
        return res

    def evaluate(self, policy_id: str, p: PLike) -> float:
        pv = as_pvalue(p)
        idx = self.evaluator.index_of(policy_id)
        self.ledger.point_evaluations += 1
        return self.evaluator.value(idx, pv)[0]

    def stderr(self, policy_id: str, p: PLike) -> float:
        return self.evaluator.value(self.evaluator.index_of(policy_id), as_pvalue(p))[1]

    def optimum(self, p: PLike) -> float:
        """v*(p) without touching this oracle's ledger (for evaluation and checks)."""
        vals, _ = self.evaluator.all_values(as_pvalue(p))
        return float(vals.max())

    def all_values(self, p: PLike) -> np.ndarray:
        return self.evaluator.all_values(as_pvalue(p))[0]


def warm_start_gap_bound(p: float, q: float, mdp: FiniteMDP) -> float:
    """Bound (q - p) * U * H * kappa * ln(kappa) on v*(q) - v(pi_p, q)."""
    if not (math.isfinite(p) and math.isfinite(q)):
        raise ValueError("p and q must be finite")
    if not p < q:
        raise ValueError(f"need p < q, got p={p}, q={q}")
    if q > 1:
        raise ValueError("q must be <= 1")
    return (q - p) * mdp.reward_upper * mdp.horizon * slope_bound(condition_number(mdp))
