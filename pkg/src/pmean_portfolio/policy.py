"""Tabular policies, policy sets, exhaustive enumeration and JSON round-tripping."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Iterator, Sequence

import jsonschema
import numpy as np

if TYPE_CHECKING:
    from .mdp import FiniteMDP

DETERMINISTIC = "deterministic"
STOCHASTIC = "stochastic"
UNDEFINED = -1
PROB_TOL = 1e-9


class PolicyError(ValueError):
    pass


class EnumerationLimitError(PolicyError):
    """Raised when the requested policy class is larger than ``max_count``."""

    def __init__(self, count: int, max_count: int):
        super().__init__(f"policy class has {count} members, more than max_count={max_count}")
        self.count = count
        self.max_count = max_count


class PolicySchemaError(PolicyError):
    """Malformed policy-set document; ``pointer`` is a JSON pointer to the offending node."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Policy:
    """A time-dependent map (state, step) -> action distribution.

    Deterministic policies keep an (H, S) integer action table, with ``-1``
    marking an undefined pair; stochastic policies keep an (H, S, A)
    probability table whose undefined rows are all zero.
    """

    id: str
    kind: str
    n_actions: int
    actions: np.ndarray | None = None
    probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind == DETERMINISTIC:
            if self.actions is None or np.asarray(self.actions).ndim != 2:
                raise PolicyError(f"{self.id}: deterministic policy needs an (H, S) action table")
            acts = np.asarray(self.actions, dtype=np.int32)
            if np.any((acts < UNDEFINED) | (acts >= self.n_actions)):
                raise PolicyError(f"{self.id}: action index out of range")
            object.__setattr__(self, "actions", _frozen(acts))
        elif self.kind == STOCHASTIC:
            if self.probs is None or np.asarray(self.probs).ndim != 3:
                raise PolicyError(f"{self.id}: stochastic policy needs an (H, S, A) table")
            probs = np.asarray(self.probs, dtype=float)
            if probs.shape[2] != self.n_actions:
                raise PolicyError(f"{self.id}: probability rows must have {self.n_actions} entries")
            if np.any(probs < 0):
                raise PolicyError(f"{self.id}: negative probability")
            sums = probs.sum(axis=2)
            bad = (np.abs(sums - 1.0) > PROB_TOL) & (sums != 0.0)
            if np.any(bad):
                h, s = np.argwhere(bad)[0]
                raise PolicyError(f"{self.id}: distribution at (s={s}, h={h + 1}) sums to {sums[h, s]}")
            object.__setattr__(self, "probs", _frozen(probs))
        else:
            raise PolicyError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def deterministic(cls, id: str, actions, n_actions: int) -> Policy:
        return cls(id=id, kind=DETERMINISTIC, n_actions=n_actions, actions=np.asarray(actions))

    @classmethod
    def stochastic(cls, id: str, probs) -> Policy:
        probs = np.asarray(probs, dtype=float)
        return cls(id=id, kind=STOCHASTIC, n_actions=probs.shape[2], probs=probs)

    @classmethod
    def stationary(cls, id: str, state_actions, horizon: int, n_actions: int) -> Policy:
        acts = np.tile(np.asarray(state_actions, dtype=np.int32), (horizon, 1))
        return cls.deterministic(id, acts, n_actions)

    @property
    def horizon(self) -> int:
        table = self.actions if self.actions is not None else self.probs
        return table.shape[0]

    @property
    def n_states(self) -> int:
        table = self.actions if self.actions is not None else self.probs
        return table.shape[1]

    def defined(self) -> np.ndarray:
        """Boolean (H, S) mask of pairs with a distribution."""
        if self.actions is not None:
            return self.actions != UNDEFINED
        return self.probs.sum(axis=2) > 0

    def distribution(self, state: int, step: int) -> np.ndarray:
        """Action distribution at ``state`` and 0-based ``step`` (zeros if undefined)."""
        if self.actions is not None:
            out = np.zeros(self.n_actions)
            a = self.actions[step, state]
            if a != UNDEFINED:
                out[a] = 1.0
            return out
        return np.array(self.probs[step, state])

    def action_probs(self) -> np.ndarray:
        """Dense (H, S, A) table."""
        if self.probs is not None:
            return np.array(self.probs)
        out = np.zeros(self.actions.shape + (self.n_actions,))
        h, s = np.nonzero(self.actions != UNDEFINED)
        out[h, s, self.actions[h, s]] = 1.0
        return out

    def same_table(self, other: Policy) -> bool:
        if self.kind != other.kind or self.n_actions != other.n_actions:
            return False
        if self.kind == DETERMINISTIC:
            return self.actions.shape == other.actions.shape and bool(np.all(self.actions == other.actions))
        return self.probs.shape == other.probs.shape and bool(np.all(self.probs == other.probs))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Policy):
            return NotImplemented
        return self.id == other.id and self.same_table(other)

    def __hash__(self) -> int:
        return hash((self.id, self.kind))


@dataclass(frozen=True, eq=False)
class PolicySet:
    """An ordered collection of policies with unique ids."""

    policies: tuple[Policy, ...]
    meta: dict = field(default_factory=dict)
    mdp_ref: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "policies", tuple(self.policies))
        index: dict[str, int] = {}
        for i, pol in enumerate(self.policies):
            if pol.id in index:
                raise PolicyError(f"duplicate policy id {pol.id!r}")
            index[pol.id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.policies)

    def __iter__(self) -> Iterator[Policy]:
        return iter(self.policies)

    def __getitem__(self, i: int) -> Policy:
        return self.policies[i]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.policies]

    def index_of(self, policy_id: str) -> int:
        try:
            return self._index[policy_id]
        except KeyError:
            raise KeyError(f"unknown policy id {policy_id!r}") from None

    def get(self, policy_id: str) -> Policy:
        return self.policies[self.index_of(policy_id)]

    def subset(self, ids: Iterable[str]) -> PolicySet:
        return PolicySet(tuple(self.get(i) for i in ids), dict(self.meta), self.mdp_ref)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicySet):
            return NotImplemented
        return (
            self.mdp_ref == other.mdp_ref
            and self.meta == other.meta
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.policies, other.policies))
        )


def enumeration_count(mdp: FiniteMDP, stationary: bool = False) -> int:
    cells = mdp.n_states if stationary else mdp.n_states * mdp.horizon
    return mdp.n_actions**cells


def enumerate_deterministic_policies(
    mdp: FiniteMDP, max_count: int = 1_000_000, stationary: bool = False
) -> PolicySet:
    """All deterministic policies of ``mdp`` in lexicographic order of their action tables.

    The table is flattened step-major (step 1 states first). With
    ``stationary=True`` only policies that ignore the step are produced.
    """
    count = enumeration_count(mdp, stationary)
    if count > max_count:
        raise EnumerationLimitError(count, max_count)
    S, H, A = mdp.n_states, mdp.horizon, mdp.n_actions
    width = len(str(count - 1))
    policies = []
    cells = S if stationary else S * H
    for i, combo in enumerate(itertools.product(range(A), repeat=cells)):
        table = np.array(combo, dtype=np.int32).reshape(-1, S)
        if stationary:
            table = np.tile(table, (H, 1))
        policies.append(Policy.deterministic(f"det-{i:0{width}d}", table, A))
    meta = {"generator": "exhaustive", "stationary": stationary}
    return PolicySet(tuple(policies), meta, mdp.ref())


# --------------------------------------------------------------------------
# JSON

_SCHEMA = {
    "type": "object",
    "required": ["policies"],
    "properties": {
        "mdp_ref": {"type": ["string", "null"]},
        "meta": {"type": "object"},
        "policies": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind", "table", "horizon", "n_states", "n_actions"],
                "properties": {
                    "id": {"type": "string"},
                    "kind": {"enum": [DETERMINISTIC, STOCHASTIC]},
                    "horizon": {"type": "integer", "minimum": 1},
                    "n_states": {"type": "integer", "minimum": 1},
                    "n_actions": {"type": "integer", "minimum": 1},
                    "table": {
                        "type": "object",
                        "propertyNames": {"pattern": r"^\d+,(\d+|\*)$"},
                        "additionalProperties": {
                            "oneOf": [
                                {"type": "integer", "minimum": 0},
                                {"type": "array", "items": {"type": "number", "minimum": 0}},
                            ]
                        },
                    },
                },
            },
        },
    },
}


def _pointer(path: Iterable[Any]) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def _table_to_json(pol: Policy) -> dict[str, Any]:
    table: dict[str, Any] = {}
    if pol.kind == DETERMINISTIC:
        acts = pol.actions
        for s in range(pol.n_states):
            col = acts[:, s]
            if np.all(col == col[0]):
                if col[0] != UNDEFINED:
                    table[f"{s},*"] = int(col[0])
                continue
            for h in range(pol.horizon):
                if col[h] != UNDEFINED:
                    table[f"{s},{h + 1}"] = int(col[h])
    else:
        probs = pol.probs
        for s in range(pol.n_states):
            rows = probs[:, s, :]
            if np.all(rows == rows[0]):
                if rows[0].sum() > 0:
                    table[f"{s},*"] = [float(v) for v in rows[0]]
                continue
            for h in range(pol.horizon):
                if rows[h].sum() > 0:
                    table[f"{s},{h + 1}"] = [float(v) for v in rows[h]]
    return table


def policy_to_json(pol: Policy) -> dict[str, Any]:
    return {
        "id": pol.id,
        "kind": pol.kind,
        "horizon": pol.horizon,
        "n_states": pol.n_states,
        "n_actions": pol.n_actions,
        "table": _table_to_json(pol),
    }


def policy_set_to_json(pset: PolicySet) -> dict[str, Any]:
    return {
        "mdp_ref": pset.mdp_ref,
        "meta": pset.meta,
        "policies": [policy_to_json(p) for p in pset.policies],
    }


def dumps_policy_set(pset: PolicySet) -> str:
    """Canonical serialization: identical sets give identical bytes."""
    return json.dumps(policy_set_to_json(pset), sort_keys=True, separators=(",", ":")) + "\n"


def _policy_from_json(doc: dict[str, Any], where: str) -> Policy:
    H, S, A = doc["horizon"], doc["n_states"], doc["n_actions"]
    det = doc["kind"] == DETERMINISTIC
    table = np.full((H, S), UNDEFINED, dtype=np.int32) if det else np.zeros((H, S, A))
    for key, val in doc["table"].items():
        ptr = f"{where}/table/{key}"
        s_raw, h_raw = key.split(",")
        s = int(s_raw)
        if s >= S:
            raise PolicySchemaError(ptr, f"state index {s} out of range")
        if h_raw == "*":
            steps = range(H)
        else:
            h = int(h_raw)
            if not 1 <= h <= H:
                raise PolicySchemaError(ptr, f"step {h} outside [1, {H}]")
            steps = [h - 1]
        if det:
            if not isinstance(val, int) or val >= A:
                raise PolicySchemaError(ptr, "deterministic entries are action indices")
            for h in steps:
                table[h, s] = val
        else:
            if not isinstance(val, list) or len(val) != A:
                raise PolicySchemaError(ptr, f"expected {A} probabilities")
            if abs(sum(val) - 1.0) > PROB_TOL:
                raise PolicySchemaError(ptr, "probabilities must sum to 1")
            for h in steps:
                table[h, s] = val
    if det:
        return Policy.deterministic(doc["id"], table, A)
    return Policy(id=doc["id"], kind=STOCHASTIC, n_actions=A, probs=table)


def policy_set_from_json(doc: Any) -> PolicySet:
    validator = jsonschema.Draft7Validator(_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise PolicySchemaError(_pointer(err.absolute_path), err.message)
    policies = [_policy_from_json(p, f"/policies/{i}") for i, p in enumerate(doc["policies"])]
    try:
        return PolicySet(tuple(policies), doc.get("meta", {}), doc.get("mdp_ref"))
    except PolicyError as exc:
        raise PolicySchemaError("/policies", str(exc)) from exc


def save_policy_set(pset: PolicySet, path: str | Path) -> None:
    Path(path).write_text(dumps_policy_set(pset))


def load_policy_set(path: str | Path) -> PolicySet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PolicySchemaError("", f"invalid JSON: {exc}") from exc
    return policy_set_from_json(doc)


def check_compatible(pset: Sequence[Policy], mdp: FiniteMDP) -> None:
    """Raise unless every policy has the MDP's horizon, state and action counts."""
    for pol in pset:
        if (pol.horizon, pol.n_states, pol.n_actions) != (mdp.horizon, mdp.n_states, mdp.n_actions):
            raise PolicyError(
                f"{pol.id}: shape (H={pol.horizon}, S={pol.n_states}, A={pol.n_actions}) does not "
                f"match MDP (H={mdp.horizon}, S={mdp.n_states}, A={mdp.n_actions})"
            )
