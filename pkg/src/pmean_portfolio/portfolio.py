"""Portfolio construction and evaluation.

``p_mean_portfolio`` walks p upward from the cutoff ``p_floor(N, alpha)``,
using ``line_search`` to find how far each optimal policy stays
alpha-approximate. ``budget_constrained_portfolio`` spends exactly K oracle
calls, splitting the interval whose left policy looks worst at its right end.
``approximation_factor`` measures any portfolio on a grid of p values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .oracle import CallLedger, Oracle
from .welfare import NEG_INF, DomainError, PLike, PValue, as_pvalue, p_floor

PMEAN = "pmean"
BUDGET = "budget"
RANDOM_P = "random_p"
RANDOM_POLICY = "random_policy"

DEFAULT_ALPHAS = tuple(round(0.05 * k, 2) for k in range(1, 20)) + (0.99,)
DEFAULT_GRID_POINTS = 1000
DEFAULT_GRID_LOW = -100.0
DEFAULT_BUDGET_P0 = -100.0

MAX_BISECTIONS = 200
MIN_BRACKET = 1e-9
DEGRADED = "degraded"
STALLED = "stalled"
# relative slack when checking the line-search lemmas on recorded floats
CHECK_RTOL = 1e-12


# --------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class PortfolioEntry:
    p: PValue | None
    policy_id: str
    v_star: float | None

    def to_json(self) -> dict[str, Any]:
        return {"p": None if self.p is None else self.p.to_json(), "policy_id": self.policy_id,
                "v_star": self.v_star}


@dataclass
class Portfolio:
    algorithm: str
    entries: list[PortfolioEntry]
    alpha: float | None = None
    K: int | None = None
    p0: float | None = None
    oracle_calls: int = 0
    seed: int | None = None
    flags: list[str] = field(default_factory=list)
    history: dict[str, Any] = field(default_factory=dict)
    ledger: CallLedger | None = None

    @property
    def policy_ids(self) -> list[str]:
        """Distinct policies in order of first appearance."""
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.policy_id, None)
        return list(seen)

    @property
    def size(self) -> int:
        return len(self.policy_ids)

    @property
    def degraded(self) -> bool:
        return DEGRADED in self.flags

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "algorithm": self.algorithm,
            "entries": [e.to_json() for e in self.entries],
            "size": self.size,
            "oracle_calls": self.oracle_calls,
            "seed": self.seed,
            "flags": list(self.flags),
        }
        if self.alpha is not None:
            doc["alpha"] = self.alpha
        if self.K is not None:
            doc["K"] = self.K
        if self.p0 is not None:
            doc["p0"] = self.p0
        if self.history:
            doc["history"] = self.history
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> Portfolio:
        entries = [
            PortfolioEntry(None if e.get("p") is None else as_pvalue(e["p"]), e["policy_id"], e.get("v_star"))
            for e in doc["entries"]
        ]
        if not entries:
            raise ValueError("portfolio has no entries")
        return cls(doc["algorithm"], entries, doc.get("alpha"), doc.get("K"), doc.get("p0"),
                   doc.get("oracle_calls", 0), doc.get("seed"), list(doc.get("flags", [])),
                   doc.get("history", {}))


@dataclass
class LineSearchStep:
    a: float
    b: float
    q: float
    v_pi_a: float
    v_star_a: float
    v_star_b: float
    v_star_q: float
    moved_a: bool


@dataclass
class LineSearchTrace:
    p: float
    policy_id: str
    alpha: float
    v_star_p: float
    steps: list[LineSearchStep] = field(default_factory=list)
    b_star: float = 1.0
    v_star_b_star: float = math.nan
    v_pi_b_star: float = math.nan
    degraded: bool = False

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class IntervalFactor:
    left_p: float
    right_p: float
    left_policy_id: str
    u: float


@dataclass
class EvalReport:
    grid: list[tuple[PValue, float, float, float]]
    q_min: float
    argmin_p: PValue

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "best_in_portfolio", "v_star", "ratio"])
        for p, best, vstar, ratio in self.grid:
            w.writerow([p.to_json(), repr(best), repr(vstar), repr(ratio)])
        return buf.getvalue()


# --------------------------------------------------------------------------
# line search


def _lower(oracle: Oracle, value: float, se: float) -> float:
    return value - oracle.stderr_margin * se


def _upper(oracle: Oracle, value: float, se: float) -> float:
    return value + oracle.stderr_margin * se


def line_search(
    oracle: Oracle,
    p: PLike,
    alpha: float,
    max_bisections: int = MAX_BISECTIONS,
    min_bracket: float = MIN_BRACKET,
) -> LineSearchTrace:
    """Largest-found ``b*`` such that the policy optimal at ``p`` is alpha-approximate on [p, b*].

    Bisects [a, b] starting from [p, 1]. The midpoint ``q`` becomes the new
    ``a`` when v(pi, a) >= sqrt(alpha) * v*(q), otherwise the new ``b``; the
    search stops once v(pi, a) >= alpha * v*(b). If the bracket shrinks below
    ``min_bracket`` or ``max_bisections`` is reached first, the current ``b``
    is returned with ``degraded=True``.
    """
    pv = as_pvalue(p)
    if pv.is_neg_inf or pv.value >= 1.0:
        raise DomainError(f"line search needs a finite p < 1, got {pv!r}")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    root = math.sqrt(alpha)
    start = oracle.solve(pv)
    pid = start.best_policy_id
    a, b = pv.value, 1.0
    v_a = oracle.evaluate(pid, a)
    se_a = oracle.stderr(pid, a)
    trace = LineSearchTrace(p=a, policy_id=pid, alpha=alpha, v_star_p=start.best_value)
    while True:
        star_b = oracle.solve(b)
        if _lower(oracle, v_a, se_a) >= alpha * _upper(oracle, star_b.best_value, star_b.stderr):
            break
        if len(trace.steps) >= max_bisections or b - a < min_bracket:
            trace.degraded = True
            break
        q = 0.5 * (a + b)
        star_q = oracle.solve(q)
        moved = _lower(oracle, v_a, se_a) >= root * _upper(oracle, star_q.best_value, star_q.stderr)
        trace.steps.append(
            LineSearchStep(a, b, q, v_a, oracle.solve(a).best_value, star_b.best_value, star_q.best_value, moved)
        )
        if moved:
            a = q
            v_a = oracle.evaluate(pid, a)
            se_a = oracle.stderr(pid, a)
        else:
            b = q
    trace.b_star = b
    trace.v_star_b_star = oracle.solve(b).best_value
    trace.v_pi_b_star = oracle.evaluate(pid, b)
    return trace


def trace_violations(trace: LineSearchTrace) -> list[str]:
    """Check the recorded numbers against the line-search invariants.

    Every step must satisfy v(pi, a) >= sqrt(alpha) * v*(a); when the search
    ended below 1 it must also hold that v*(b*) >= v*(p) / sqrt(alpha) and
    v(pi, b*) >= alpha * v*(b*).
    """
    root = math.sqrt(trace.alpha)
    out = []
    for i, st in enumerate(trace.steps):
        if st.v_pi_a < root * st.v_star_a * (1 - CHECK_RTOL):
            out.append(f"p={trace.p}: step {i}: v(pi, a)={st.v_pi_a} < sqrt(alpha) v*(a)={root * st.v_star_a}")
    if trace.b_star < 1.0 and not trace.degraded:
        if trace.v_star_b_star < trace.v_star_p / root * (1 - CHECK_RTOL):
            out.append(f"p={trace.p}: v*(b*)={trace.v_star_b_star} < v*(p)/sqrt(alpha)={trace.v_star_p / root}")
        if trace.v_pi_b_star < trace.alpha * trace.v_star_b_star * (1 - CHECK_RTOL):
            out.append(f"p={trace.p}: v(pi, b*) < alpha v*(b*)")
    return out


# --------------------------------------------------------------------------
# algorithms


def p_mean_portfolio(oracle: Oracle, alpha: float, max_iterations: int = 10_000) -> Portfolio:
    """Alpha-approximate portfolio for every p <= 1.

    Calls are counted on a fork of ``oracle``, so ``oracle_calls`` is the
    number of distinct p values this run solved even when the value cache is
    already warm.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if oracle.n_rewards is None:
        raise ValueError("oracle does not know the number of reward functions")
    run = oracle.fork()
    p = p_floor(run.n_rewards, alpha)
    entries: list[PortfolioEntry] = []
    traces: list[LineSearchTrace] = []
    flags: list[str] = []
    while p < 1.0:
        if len(entries) >= max_iterations:
            flags.append("iteration-cap")
            break
        res = run.solve(p)
        entries.append(PortfolioEntry(res.p, res.best_policy_id, res.best_value))
        trace = line_search(run, p, alpha)
        traces.append(trace)
        if trace.degraded and DEGRADED not in flags:
            flags.append(DEGRADED)
        if trace.degraded and trace.b_star - p <= 2 * MIN_BRACKET:
            # noisy comparisons never accept a move; give up rather than creep
            flags.append(STALLED)
            break
        p = trace.b_star
    return Portfolio(
        PMEAN, entries, alpha=alpha, p0=entries[0].p.value, oracle_calls=run.ledger.oracle_calls,
        flags=flags, history={"line_searches": [t.to_json() for t in traces]}, ledger=run.ledger,
    )


def line_search_traces(portfolio: Portfolio) -> list[LineSearchTrace]:
    out = []
    for doc in portfolio.history.get("line_searches", []):
        steps = [LineSearchStep(**s) for s in doc["steps"]]
        out.append(LineSearchTrace(**{**doc, "steps": steps}))
    return out


def interval_factors(oracle: Oracle, chosen: dict[float, str]) -> list[IntervalFactor]:
    """u(l) = v(pi_left, right) / v*(right) for consecutive chosen p values.

    ``v*(right)`` is read from the solve already made at ``right``, so only
    point evaluations are spent here.
    """
    ps = sorted(chosen)
    out = []
    for left, right in zip(ps, ps[1:]):
        pid = chosen[left]
        u = oracle.evaluate(pid, right) / oracle.solve(right).best_value
        out.append(IntervalFactor(left, right, pid, u))
    return out


def budget_constrained_portfolio(oracle: Oracle, K: int, p0: float = DEFAULT_BUDGET_P0) -> Portfolio:
    """Heuristic portfolio from exactly ``K`` oracle calls.

    Solves at ``p0`` and at 1, then repeatedly at the midpoint of the interval
    with the smallest factor u(l). Intervals whose midpoint was already chosen
    are skipped in favour of the next-worst one.
    """
    if int(K) != K or K < 1:
        raise DomainError(f"budget K must be a positive integer, got {K}")
    p0 = float(p0)
    if not (math.isfinite(p0) and p0 < 1.0):
        raise DomainError(f"p0 must be finite and < 1, got {p0}")
    run = oracle.fork()
    chosen: dict[float, str] = {}
    order: list[tuple[float, Any]] = []
    rounds: list[dict[str, Any]] = []
    flags: list[str] = []
    for t in range(1, K + 1):
        if t == 1:
            p = p0
        elif t == 2:
            p = 1.0
        else:
            factors = interval_factors(run, chosen)
            ranked = sorted(range(len(factors)), key=lambda l: (factors[l].u, l))
            p = None
            for l in ranked:
                mid = 0.5 * (factors[l].left_p + factors[l].right_p)
                if mid not in chosen:
                    p, picked = mid, l
                    break
            rounds.append({
                "t": t,
                "factors": [asdict(f) for f in factors],
                "chosen_interval": None if p is None else picked,
            })
            if p is None:
                flags.append("no-free-midpoint")
                break
        res = run.solve(p)
        chosen[p] = res.best_policy_id
        order.append((p, res))
    entries = [PortfolioEntry(res.p, res.best_policy_id, res.best_value) for _, res in sorted(order, key=lambda x: x[0])]
    return Portfolio(
        BUDGET, entries, K=int(K), p0=p0, oracle_calls=run.ledger.oracle_calls, flags=flags,
        history={"selection_order": [p for p, _ in order], "rounds": rounds}, ledger=run.ledger,
    )


def random_p_baseline(oracle: Oracle, K: int, p0: float, seed: int, trials: int = 10) -> list[Portfolio]:
    """``trials`` portfolios, each the optimal policies at K uniform draws of p from [p0, 1]."""
    if K < 1 or trials < 1:
        raise DomainError("K and trials must be >= 1")
    out = []
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        ps = np.sort(rng.uniform(p0, 1.0, size=K))
        run = oracle.fork()
        entries = []
        for p in ps:
            res = run.solve(float(p))
            if not entries or entries[-1].p != res.p:
                entries.append(PortfolioEntry(res.p, res.best_policy_id, res.best_value))
        out.append(Portfolio(RANDOM_P, entries, K=K, p0=p0, oracle_calls=run.ledger.oracle_calls,
                             seed=seed, history={"trial": t}, ledger=run.ledger))
    return out


def random_policy_baseline(policy_ids: Sequence[str], K: int, seed: int, trials: int = 10) -> list[Portfolio]:
    """``trials`` portfolios of K policies drawn without replacement; no oracle calls."""
    ids = list(policy_ids)
    if K < 1 or trials < 1:
        raise DomainError("K and trials must be >= 1")
    if K > len(ids):
        raise DomainError(f"cannot sample K={K} policies from a class of {len(ids)}")
    out = []
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        picks = rng.choice(len(ids), size=K, replace=False)
        entries = [PortfolioEntry(None, ids[i], None) for i in picks]
        out.append(Portfolio(RANDOM_POLICY, entries, K=K, seed=seed, history={"trial": t}))
    return out


def alpha_sweep(oracle: Oracle, alphas: Sequence[float] = DEFAULT_ALPHAS) -> dict[int, tuple[float, Portfolio]]:
    """For each portfolio size reached, the smallest alpha producing it and that portfolio."""
    alphas = list(alphas)
    if any(x >= y for x, y in zip(alphas, alphas[1:])):
        raise DomainError("alphas must be strictly increasing")
    found: dict[int, tuple[float, Portfolio]] = {}
    for alpha in alphas:
        port = p_mean_portfolio(oracle, alpha)
        found.setdefault(port.size, (alpha, port))
    return dict(sorted(found.items()))


# --------------------------------------------------------------------------
# evaluation


def default_grid_low(n_rewards: int, alphas: Iterable[float] = ()) -> float:
    """min(p_floor(N, smallest alpha), -100)."""
    alphas = list(alphas)
    if not alphas:
        return DEFAULT_GRID_LOW
    return min(p_floor(n_rewards, min(alphas)), DEFAULT_GRID_LOW)


def evaluation_grid(points: int = DEFAULT_GRID_POINTS, low: float = DEFAULT_GRID_LOW) -> list[PValue]:
    """``-inf`` followed by ``points - 1`` evenly spaced values on [low, 1]."""
    if points < 2:
        raise DomainError("grid needs at least 2 points")
    if not low < 1.0:
        raise DomainError("grid lower end must be < 1")
    return [NEG_INF] + [PValue(float(x)) for x in np.linspace(low, 1.0, points - 1)]


def approximation_factor(
    portfolio: Portfolio | Sequence[str],
    oracle: Oracle,
    grid_points: int = DEFAULT_GRID_POINTS,
    grid_low: float | None = None,
) -> EvalReport:
    """Worst ratio over the grid of (best portfolio value) / (optimal value)."""
    ids = portfolio.policy_ids if isinstance(portfolio, Portfolio) else list(dict.fromkeys(portfolio))
    if not ids:
        raise ValueError("empty portfolio")
    if grid_low is None:
        alphas = [portfolio.alpha] if isinstance(portfolio, Portfolio) and portfolio.alpha else []
        grid_low = default_grid_low(oracle.n_rewards or 1, alphas)
    run = oracle.fork()
    rows = []
    for pv in evaluation_grid(grid_points, grid_low):
        vstar = run.solve(pv).best_value
        best = max(run.evaluate(pid, pv) for pid in ids)
        rows.append((pv, best, vstar, best / vstar))
    ratios = np.array([r[3] for r in rows])
    i = int(np.argmin(ratios))
    return EvalReport(rows, float(ratios[i]), rows[i][0])


def portfolio_size_bound(kappa: float, alpha: float) -> float:
    """2 ln(kappa) / ln(1/alpha) + 2."""
    return 2.0 * math.log(kappa) / math.log(1.0 / alpha) + 2.0
