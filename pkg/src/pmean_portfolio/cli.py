"""Command-line experiment driver.

A run reads a JSON or YAML config, builds the environment, policy class and
oracle, runs one algorithm (plus optional baselines), measures every portfolio
on a p grid and writes JSON/CSV results with a manifest of their hashes.

Exit codes: 0 success, 2 config error, 3 environment refused, 4 a portfolio
carries the degraded flag (outputs are still written).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np
import yaml

from . import __version__
from .envs import (
    DisasterConfig,
    DisasterSimulator,
    EnvironmentSizeError,
    build_disaster_mdp,
    generate_disaster_policies,
    generate_rules,
    random_mdp,
    random_policies,
)
from .envs.disaster import DENSITY, INCOME, PROXIMITY
from .mdp import FiniteMDP, MDPError, PathCapExceeded, expected_return_vector, load_mdp, save_mdp
from .oracle import ESR, SER, Oracle, OracleConfigError, PolicyEvaluator, SampledSERBackend
from .policy import PolicyError, PolicySchemaError, PolicySet, enumerate_deterministic_policies, load_policy_set, save_policy_set
from .portfolio import (
    DEFAULT_ALPHAS,
    DEFAULT_BUDGET_P0,
    DEFAULT_GRID_POINTS,
    Portfolio,
    alpha_sweep,
    approximation_factor,
    budget_constrained_portfolio,
    default_grid_low,
    p_mean_portfolio,
    random_p_baseline,
    random_policy_baseline,
)
from .welfare import DomainError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENVIRONMENT = 3
EXIT_DEGRADED = 4

BUILTINS = ("disaster-reduced", "disaster-full", "random", "flat")
DEFAULT_POLICY_COUNT = 100
DEFAULT_TRIALS = 10
MANIFEST = "manifest.json"

_ALPHA = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_TRIALS = {"type": "object", "additionalProperties": False, "properties": {"trials": {"type": "integer", "minimum": 1}}}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["environment"],
    "properties": {
        "name": {"type": "string"},
        "environment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "builtin": {"enum": list(BUILTINS)},
                "file": {"type": "string"},
                "params": {"type": "object"},
                "mode": {"enum": ["exact", "mc"]},
            },
            "oneOf": [{"required": ["builtin"]}, {"required": ["file"]}],
        },
        "policies": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {
                "source": {"enum": ["generator", "file", "exhaustive"]},
                "count": {"type": "integer", "minimum": 1},
                "seed": _SEED,
                "path": {"type": "string"},
                "stationary": {"type": "boolean"},
                "max_count": {"type": "integer", "minimum": 1},
            },
            "if": {"properties": {"source": {"const": "file"}}},
            "then": {"required": ["path"]},
        },
        "rule": {"enum": [SER, ESR]},
        "esr_mode": {"enum": ["exact", "mc"]},
        "mc_samples": {"type": "integer", "minimum": 2},
        "stderr_margin": {"type": "number", "minimum": 0},
        "algorithm": {
            "type": "object",
            "minProperties": 1,
            "maxProperties": 1,
            "additionalProperties": False,
            "properties": {
                "pmean": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["alpha"],
                    "properties": {"alpha": _ALPHA},
                },
                "budget": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["K"],
                    "properties": {
                        "K": {"type": "integer", "minimum": 1},
                        "p0": {"type": "number", "exclusiveMaximum": 1},
                    },
                },
                "sweep": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"alphas": {"type": "array", "items": _ALPHA, "minItems": 1}},
                },
            },
        },
        "baselines": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "random_policy": _TRIALS,
                "random_p": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "trials": {"type": "integer", "minimum": 1},
                        "p0": {"type": "number", "exclusiveMaximum": 1},
                    },
                },
            },
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "grid_points": {"type": "integer", "minimum": 2},
                "grid_low": {"type": "number", "exclusiveMaximum": 1},
            },
        },
        "breakdown": {
            "type": "object",
            "additionalProperties": False,
            "required": ["groups"],
            "properties": {
                "groups": {
                    "oneOf": [
                        {"type": "string"},
                        {"type": "object", "additionalProperties": {"type": "array", "items": {"type": "integer"}}},
                    ]
                },
                "baseline": {"type": "string"},
                "svg": {"type": "boolean"},
            },
        },
        "seed": _SEED,
        "output": {"type": "string"},
    },
    "allOf": [
        {"if": {"required": ["rule"], "properties": {"rule": {"const": ESR}}}, "then": {"required": ["esr_mode"]}},
        {"if": {"required": ["esr_mode"], "properties": {"esr_mode": {"const": "mc"}}}, "then": {"required": ["mc_samples"]}},
    ],
}


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


class EnvironmentRefused(RuntimeError):
    pass


def _pointer(path: Sequence[Any]) -> str:
    return "".join(f"/{p}" for p in path)


def validate_config(doc: Any) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise ConfigError(_pointer(err.absolute_path), err.message)


# --------------------------------------------------------------------------
# config


@dataclass
class RunConfig:
    doc: dict[str, Any]
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError("", f"cannot read config {path}: {e.strerror}") from None
        try:
            doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as e:
            raise ConfigError("", f"cannot parse {path}: {e}") from None
        return cls.from_dict(doc, overrides, path.parent)

    @classmethod
    def from_dict(cls, doc: Any, overrides: Mapping[str, Any] | None = None, base_dir: Path | None = None) -> RunConfig:
        validate_config(doc)
        doc = copy.deepcopy(doc)
        for key, value in (overrides or {}).items():
            if value is not None:
                doc[key] = value
        if doc.get("rule") == ESR and "esr_mode" not in doc:
            doc["esr_mode"] = "mc" if "mc_samples" in doc else "exact"
        validate_config(doc)
        return cls(doc, base_dir or Path.cwd())

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    @property
    def rule(self) -> str:
        return self.doc.get("rule", SER)

    @property
    def output(self) -> Path:
        # input files are relative to the config, outputs to the working directory
        return Path(self.doc.get("output", "out")).resolve()

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def hash(self) -> str:
        """Content hash of everything except the output location."""
        doc = {k: v for k, v in self.doc.items() if k != "output"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------
# environment, policies, oracle


@dataclass
class Environment:
    name: str
    n_rewards: int
    kappa: float
    mdp: FiniteMDP | None = None
    disaster: DisasterConfig | None = None
    simulator: DisasterSimulator | None = None


def build_environment(cfg: RunConfig) -> Environment:
    env = cfg.doc["environment"]
    params = dict(env.get("params", {}))
    mode = env.get("mode")
    try:
        if "file" in env:
            mdp = load_mdp(cfg.resolve(env["file"]))
            return Environment(mdp.name or env["file"], mdp.n_rewards, mdp.reward_upper / mdp.reward_lower, mdp)
        name = env["builtin"]
        if name.startswith("disaster"):
            if name == "disaster-full":
                dc = DisasterConfig.full(**params)
            elif "clusters" in params or "cluster_ids" in params:
                dc = DisasterConfig.from_json(params)
            else:
                dc = DisasterConfig.reduced(**params)
            if name == "disaster-full" and mode != "exact":
                sim = DisasterSimulator(dc)
                L, U = sim.reward_range()
                return Environment(name, dc.n_clusters, U / L, disaster=dc, simulator=sim)
            mdp = build_disaster_mdp(dc)
            return Environment(name, mdp.n_rewards, mdp.reward_upper / mdp.reward_lower, mdp, disaster=dc)
        shape = {"n_states": 3, "n_actions": 2, "n_rewards": 2, "horizon": 2}
        shape.update(params)
        if name == "flat":
            shape["kappa"] = 1.0
        shape.setdefault("seed", cfg.seed)
        mdp = random_mdp(**shape)
        return Environment(name, mdp.n_rewards, mdp.reward_upper / mdp.reward_lower, mdp)
    except EnvironmentSizeError as e:
        raise EnvironmentRefused(str(e)) from None
    except MDPError as e:
        raise EnvironmentRefused(str(e)) from None
    except (TypeError, ValueError) as e:
        raise ConfigError("/environment/params", str(e)) from None


def build_policies(cfg: RunConfig, env: Environment) -> PolicySet | list:
    """PolicySet for tabulated environments, priority rules for the factored simulator."""
    block = cfg.doc.get("policies", {"source": "generator"})
    count = block.get("count", DEFAULT_POLICY_COUNT)
    seed = block.get("seed", cfg.seed)
    source = block["source"]
    if env.simulator is not None:
        if source != "generator":
            raise ConfigError("/policies/source", "the factored simulator only supports generated priority policies")
        return generate_rules(count, seed)
    try:
        if source == "file":
            return load_policy_set(cfg.resolve(block["path"]))
        if source == "exhaustive":
            return enumerate_deterministic_policies(
                env.mdp, max_count=block.get("max_count", 100_000), stationary=block.get("stationary", False)
            )
        if env.disaster is not None:
            return generate_disaster_policies(env.disaster, count, seed, mdp=env.mdp)
        return random_policies(env.mdp, count, seed)
    except PolicySchemaError as e:
        raise ConfigError("/policies/path" + e.pointer, str(e)) from None
    except PolicyError as e:
        raise ConfigError("/policies", str(e)) from None


def build_oracle(cfg: RunConfig, env: Environment, policies) -> Oracle:
    margin = cfg.doc.get("stderr_margin", 0.0)
    n = cfg.doc.get("mc_samples", 1000)
    if env.simulator is not None:
        if cfg.rule != SER:
            raise ConfigError("/rule", "the factored simulator supports the ser rule only")
        sim = DisasterSimulator(env.disaster, list(policies))
        backend = SampledSERBackend([r.id for r in policies], sim.sampler(), n, cfg.seed)
        return Oracle(PolicyEvaluator(backend), SER, n_rewards=env.n_rewards, kappa=env.kappa,
                      stderr_margin=margin, description="simulated/ser")
    try:
        return Oracle.for_policy_set(
            env.mdp, policies, rule=cfg.rule, esr_mode=cfg.doc.get("esr_mode", "exact"),
            n_samples=n, seed=cfg.seed, stderr_margin=margin,
        )
    except (OracleConfigError, PolicyError) as e:
        raise ConfigError("/policies", str(e)) from None


# --------------------------------------------------------------------------
# outputs


def _canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


class OutputDir:
    """Writes result files and remembers their hashes for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, str] = {}
        root.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> Path:
        path = self.root / name
        data = text.encode()
        path.write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()
        return path

    def record(self, name: str) -> None:
        self.files[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    version: str
    wall_clock_seconds: float
    stages: dict[str, dict[str, int]]
    files: dict[str, str]
    exit_code: int = EXIT_OK

    def to_json(self) -> dict[str, Any]:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "wall_clock_seconds": self.wall_clock_seconds,
            "stages": self.stages,
            "files": dict(sorted(self.files.items())),
            "exit_code": self.exit_code,
        }


@dataclass
class ComparisonRow:
    size: int
    method: str
    q_min: float
    q_min_std: float
    oracle_calls: float
    alpha: float | None = None
    K: int | None = None


_METHOD_ORDER = {"p-mean": 0, "budget": 1, "random-p": 2, "random-policy": 3}


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "method", "q_min", "q_min_std", "oracle_calls", "alpha", "K"])
    for r in sorted(rows, key=lambda r: (r.size, _METHOD_ORDER.get(r.method, 9), r.method)):
        w.writerow([r.size, r.method, repr(r.q_min), repr(r.q_min_std), repr(r.oracle_calls),
                    "" if r.alpha is None else repr(r.alpha), "" if r.K is None else r.K])
    return buf.getvalue()


def read_comparison(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# breakdown


def resolve_groups(block: str | Mapping[str, Sequence[int]], env: Environment) -> dict[str, list[int]]:
    """Named partition of the stakeholders ``0..N-1``."""
    n = env.n_rewards
    if isinstance(block, str):
        if block == "all":
            groups = {"all": list(range(n))}
        elif block == "stakeholder":
            groups = {f"r{i}": [i] for i in range(n)}
        elif block in ("income", "density", "proximity"):
            if env.disaster is None:
                raise ConfigError("/breakdown/groups", f"grouping by {block} needs a disaster environment")
            order = {"income": INCOME, "density": DENSITY, "proximity": PROXIMITY}[block]
            groups = {}
            for level in order:
                members = [i for i, c in enumerate(env.disaster.clusters) if getattr(c, block) == level]
                if members:
                    groups[level] = members
        else:
            try:
                groups = json.loads(block)
            except json.JSONDecodeError:
                raise ConfigError("/breakdown/groups", f"unknown grouping {block!r}") from None
            if not isinstance(groups, dict):
                raise ConfigError("/breakdown/groups", "inline groups must be a JSON object")
    else:
        groups = {str(k): list(v) for k, v in block.items()}
    seen: list[int] = []
    for name, members in groups.items():
        if not members or not all(isinstance(i, int) and 0 <= i < n for i in members):
            raise ConfigError(f"/breakdown/groups/{name}", f"members must be stakeholder indices in [0, {n})")
        seen.extend(members)
    if sorted(seen) != list(range(n)):
        raise ConfigError("/breakdown/groups", f"groups must partition the {n} stakeholders exactly once")
    return {k: list(v) for k, v in groups.items()}


def breakdown_table(
    vectors: Mapping[str, np.ndarray], groups: Mapping[str, Sequence[int]], baseline: np.ndarray | None = None
) -> list[tuple[str, list[float]]]:
    rows = []
    base = None if baseline is None else [float(np.mean(baseline[list(m)])) for m in groups.values()]
    for pid, vec in vectors.items():
        vals = [float(np.mean(np.asarray(vec)[list(m)])) for m in groups.values()]
        if base is not None:
            vals = [v / b for v, b in zip(vals, base)]
        rows.append((pid, vals))
    return rows


def breakdown(
    portfolio: Portfolio | Sequence[str],
    mdp: FiniteMDP,
    policies: PolicySet,
    groups: Mapping[str, Sequence[int]],
    baseline: str | None = None,
) -> str:
    """Per (policy, group) mean expected stakeholder return as CSV.

    With ``baseline`` each value is divided by the baseline policy's value for
    the same group, so the baseline itself scores 1.0 everywhere.
    """
    ids = portfolio.policy_ids if isinstance(portfolio, Portfolio) else list(dict.fromkeys(portfolio))
    vectors = {pid: expected_return_vector(mdp, policies.get(pid)) for pid in ids}
    base = None if baseline is None else expected_return_vector(mdp, policies.get(baseline))
    return breakdown_csv(breakdown_table(vectors, groups, base), list(groups))


def breakdown_csv(rows: Sequence[tuple[str, Sequence[float]]], group_names: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy_id", *group_names])
    for pid, vals in rows:
        w.writerow([pid, *(repr(v) for v in vals)])
    return buf.getvalue()


_PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7")


def breakdown_svg(rows: Sequence[tuple[str, Sequence[float]]], group_names: Sequence[str]) -> str:
    """Grouped bar chart: one cluster of bars per group, one bar per policy."""
    bar, gap, height, top, left = 14, 18, 200, 20, 40
    n_pol = max(len(rows), 1)
    peak = max((v for _, vals in rows for v in vals), default=1.0) or 1.0
    width = left + len(group_names) * (n_pol * bar + gap) + gap + 160
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + top + 40}">',
        f'<line x1="{left}" y1="{top + height}" x2="{width - 160}" y2="{top + height}" stroke="black"/>',
    ]
    for g, name in enumerate(group_names):
        x0 = left + gap + g * (n_pol * bar + gap)
        for k, (_, vals) in enumerate(rows):
            h = height * vals[g] / peak
            out.append(
                f'<rect x="{x0 + k * bar}" y="{top + height - h:.3f}" width="{bar - 2}" height="{h:.3f}" '
                f'fill="{_PALETTE[k % len(_PALETTE)]}"/>'
            )
        out.append(f'<text x="{x0}" y="{top + height + 16}" font-size="11">{_escape(name)}</text>')
    for k, (pid, _) in enumerate(rows):
        y = top + 12 + 16 * k
        out.append(f'<rect x="{width - 150}" y="{y - 9}" width="10" height="10" fill="{_PALETTE[k % len(_PALETTE)]}"/>')
        out.append(f'<text x="{width - 135}" y="{y}" font-size="11">{_escape(pid)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _vectors(env: Environment, oracle: Oracle, policies, ids: Sequence[str]) -> dict[str, np.ndarray]:
    backend = oracle.evaluator.backend
    if hasattr(backend, "vectors"):
        table = backend.vectors
        return {pid: table[oracle.evaluator.index_of(pid)] for pid in ids}
    return {pid: expected_return_vector(env.mdp, policies.get(pid)) for pid in ids}


# --------------------------------------------------------------------------
# pipeline


@dataclass
class Context:
    cfg: RunConfig
    env: Environment
    policies: Any
    oracle: Oracle
    out: OutputDir
    stages: dict[str, dict[str, int]] = field(default_factory=dict)
    ledgers: dict[str, list[dict]] = field(default_factory=dict)
    rows: list[ComparisonRow] = field(default_factory=list)
    degraded: bool = False

    def note(self, stage: str, portfolio: Portfolio) -> None:
        if portfolio.ledger is not None:
            self.stages[stage] = {
                "oracle_calls": portfolio.ledger.oracle_calls,
                "point_evaluations": portfolio.ledger.point_evaluations,
            }
            self.ledgers[stage] = portfolio.ledger.to_json()
        self.degraded = self.degraded or portfolio.degraded


def prepare(cfg: RunConfig, out: Path | None = None) -> Context:
    env = build_environment(cfg)
    policies = build_policies(cfg, env)
    oracle = build_oracle(cfg, env, policies)
    return Context(cfg, env, policies, oracle, OutputDir(out or cfg.output))


def _grid(cfg: RunConfig, alphas: Sequence[float], n_rewards: int, p0: float | None = None) -> tuple[int, float]:
    ev = cfg.doc.get("evaluation", {})
    low = ev.get("grid_low")
    if low is None:
        low = default_grid_low(n_rewards, alphas)
        if p0 is not None:
            low = min(low, p0)
    return ev.get("grid_points", DEFAULT_GRID_POINTS), low


def _write_portfolio(ctx: Context, port: Portfolio, suffix: str, grid: tuple[int, float], row: ComparisonRow) -> None:
    report = approximation_factor(port, ctx.oracle, grid_points=grid[0], grid_low=grid[1])
    ctx.out.write(f"portfolio{suffix}.json", _canonical_json(port.to_json()))
    ctx.out.write(f"eval{suffix}.csv", report.to_csv())
    row.q_min = report.q_min
    ctx.rows.append(row)


def stage_algorithm(ctx: Context, algorithm: Mapping[str, Any]) -> list[Portfolio]:
    (name, params), = algorithm.items()
    n = ctx.env.n_rewards
    try:
        if name == "pmean":
            port = p_mean_portfolio(ctx.oracle, params["alpha"])
            ctx.note("pmean", port)
            grid = _grid(ctx.cfg, [port.alpha], n)
            _write_portfolio(ctx, port, "", grid,
                             ComparisonRow(port.size, "p-mean", 0.0, 0.0, port.oracle_calls, alpha=port.alpha))
            return [port]
        if name == "budget":
            p0 = params.get("p0", DEFAULT_BUDGET_P0)
            port = budget_constrained_portfolio(ctx.oracle, params["K"], p0)
            ctx.note("budget", port)
            grid = _grid(ctx.cfg, [], n, p0)
            _write_portfolio(ctx, port, "", grid,
                             ComparisonRow(port.size, "budget", 0.0, 0.0, port.oracle_calls, K=port.K))
            return [port]
        alphas = params.get("alphas", list(DEFAULT_ALPHAS))
        sweep = alpha_sweep(ctx.oracle, alphas)
        grid = _grid(ctx.cfg, alphas, n)
        ports = []
        for size, (alpha, port) in sweep.items():
            ctx.note(f"sweep/size={size}", port)
            _write_portfolio(ctx, port, f"-size{size}", grid,
                             ComparisonRow(size, "p-mean", 0.0, 0.0, port.oracle_calls, alpha=alpha))
            ports.append(port)
        return ports
    except DomainError as e:
        raise ConfigError(f"/algorithm/{name}", str(e)) from None


def stage_baselines(ctx: Context, block: Mapping[str, Any], targets: Sequence[tuple[int, float, tuple[int, float]]]) -> None:
    """Random baselines at each (size, p0, grid) target."""
    seed = ctx.cfg.seed
    for K, p0, grid in targets:
        if "random_p" in block:
            trials = block["random_p"].get("trials", DEFAULT_TRIALS)
            base_p0 = block["random_p"].get("p0", p0)
            ports = random_p_baseline(ctx.oracle, K, base_p0, seed, trials)
            qs = [approximation_factor(p, ctx.oracle, *grid).q_min for p in ports]
            for t, p in enumerate(ports):
                ctx.note(f"random-p/K={K}/trial={t}", p)
            calls = float(np.mean([p.oracle_calls for p in ports]))
            ctx.rows.append(ComparisonRow(K, "random-p", float(np.mean(qs)), float(np.std(qs)), calls, K=K))
        if "random_policy" in block:
            trials = block["random_policy"].get("trials", DEFAULT_TRIALS)
            ids = ctx.oracle.policy_ids
            if K > len(ids):
                continue
            ports = random_policy_baseline(ids, K, seed, trials)
            qs = [approximation_factor(p, ctx.oracle, *grid).q_min for p in ports]
            ctx.rows.append(ComparisonRow(K, "random-policy", float(np.mean(qs)), float(np.std(qs)), 0.0, K=K))


def stage_breakdown(ctx: Context, port: Portfolio | Sequence[str], block: Mapping[str, Any]) -> None:
    groups = resolve_groups(block["groups"], ctx.env)
    ids = port.policy_ids if isinstance(port, Portfolio) else list(port)
    baseline = block.get("baseline")
    try:
        vectors = _vectors(ctx.env, ctx.oracle, ctx.policies, ids + ([baseline] if baseline else []))
    except KeyError as e:
        raise ConfigError("/breakdown/baseline", f"unknown policy {e}") from None
    base = vectors[baseline] if baseline else None
    rows = breakdown_table({pid: vectors[pid] for pid in ids}, groups, base)
    ctx.out.write("breakdown.csv", breakdown_csv(rows, list(groups)))
    if block.get("svg"):
        ctx.out.write("breakdown.svg", breakdown_svg(rows, list(groups)))


def finish(ctx: Context, started: float) -> RunManifest:
    if ctx.ledgers:
        ctx.out.write("ledger.json", _canonical_json(ctx.ledgers))
    if ctx.rows:
        ctx.out.write("comparison.csv", comparison_csv(ctx.rows))
    code = EXIT_DEGRADED if ctx.degraded else EXIT_OK
    manifest = RunManifest(ctx.cfg.hash(), __version__, round(time.monotonic() - started, 3),
                           dict(sorted(ctx.stages.items())), dict(ctx.out.files), code)
    (ctx.out.root / MANIFEST).write_text(_canonical_json(manifest.to_json()))
    return manifest


def run(cfg: RunConfig, algorithm: Mapping[str, Any] | None = None) -> RunManifest:
    """Algorithm, requested baselines, evaluation and breakdown for one config."""
    started = time.monotonic()
    algorithm = algorithm or cfg.doc.get("algorithm")
    if not algorithm:
        raise ConfigError("/algorithm", "an algorithm block is required")
    ctx = prepare(cfg)
    ctx.out.write("config.json", _canonical_json({k: v for k, v in cfg.doc.items() if k != "output"}))
    ports = stage_algorithm(ctx, algorithm)
    if "baselines" in cfg.doc:
        grid_alphas = [p.alpha for p in ports if p.alpha is not None]
        targets = []
        for port in ports:
            K = port.K or port.size
            p0 = port.p0 if port.p0 is not None else DEFAULT_BUDGET_P0
            targets.append((K, p0, _grid(cfg, grid_alphas, ctx.env.n_rewards, p0 if port.K else None)))
        stage_baselines(ctx, cfg.doc["baselines"], targets)
    if "breakdown" in cfg.doc:
        stage_breakdown(ctx, ports[-1], cfg.doc["breakdown"])
    return finish(ctx, started)


# --------------------------------------------------------------------------
# command line


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", required=True, help="JSON or YAML run config")
    sp.add_argument("--seed", type=int, help="master seed (u64)")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--rule", choices=[ESR, SER], help="aggregation rule")
    sp.add_argument("--mc-samples", type=int, help="Monte Carlo samples per estimate")
    sp.add_argument("--grid-points", type=int, help="evaluation grid size G")
    sp.add_argument("--grid-low", type=float, help="lower end of the evaluation grid")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmean", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("run", help="run the config's algorithm, baselines and evaluation")
    _add_common(sp)
    sp = sub.add_parser("portfolio", help="alpha-approximate portfolio by line search")
    _add_common(sp)
    sp.add_argument("--alpha", type=float)
    sp = sub.add_parser("budget", help="budget-constrained portfolio from K oracle calls")
    _add_common(sp)
    sp.add_argument("--K", type=int)
    sp.add_argument("--p0", type=float)
    sp = sub.add_parser("sweep", help="portfolios over a range of alpha values")
    _add_common(sp)
    sp.add_argument("--alphas", type=lambda s: [float(x) for x in s.split(",")], help="comma-separated")
    sp = sub.add_parser("baseline", help="random-policy and random-p baselines")
    _add_common(sp)
    sp.add_argument("--K", type=int, action="append", required=True, help="portfolio size (repeatable)")
    sp.add_argument("--p0", type=float, default=DEFAULT_BUDGET_P0)
    sp.add_argument("--trials", type=int, help=f"trials per size (default {DEFAULT_TRIALS})")
    sp = sub.add_parser("evaluate", help="approximation factor of a saved portfolio")
    _add_common(sp)
    sp.add_argument("--portfolio", required=True)
    sp = sub.add_parser("breakdown", help="per-group stakeholder returns of a portfolio")
    _add_common(sp)
    sp.add_argument("--portfolio", help="portfolio JSON (default: every policy in the class)")
    sp.add_argument("--groups", default="all", help="all, stakeholder, income, density, proximity or inline JSON")
    sp.add_argument("--baseline", help="policy id whose group values define a score of 1.0")
    sp.add_argument("--svg", action="store_true", help="also write a bar chart")

    env = sub.add_parser("env", help="environment utilities")
    env_sub = env.add_subparsers(dest="env_command", required=True)
    sp = env_sub.add_parser("build", help="write the tabulated MDP as JSON")
    _add_common(sp)
    sp = env_sub.add_parser("gen-policies", help="write the generated policy class as JSON")
    _add_common(sp)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out = None if args.out is None else str(Path(args.out).resolve())
    return {"seed": args.seed, "output": out, "rule": args.rule, "mc_samples": args.mc_samples}


def _with_grid(cfg: RunConfig, args: argparse.Namespace) -> None:
    ev = dict(cfg.doc.get("evaluation", {}))
    if args.grid_points is not None:
        ev["grid_points"] = args.grid_points
    if args.grid_low is not None:
        ev["grid_low"] = args.grid_low
    if ev:
        cfg.doc["evaluation"] = ev
        validate_config(cfg.doc)


def _load_portfolio(path: str) -> Portfolio:
    try:
        return Portfolio.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise ConfigError("/portfolio", f"cannot load portfolio {path}: {e}") from None


def _command(args: argparse.Namespace) -> int:
    cfg = RunConfig.load(args.config, _overrides(args))
    _with_grid(cfg, args)
    cmd = args.command
    started = time.monotonic()
    if cmd == "run":
        manifest = run(cfg)
    elif cmd == "portfolio":
        alpha = args.alpha if args.alpha is not None else cfg.doc.get("algorithm", {}).get("pmean", {}).get("alpha")
        if alpha is None:
            raise ConfigError("/algorithm/pmean/alpha", "alpha is required (config or --alpha)")
        manifest = run(cfg, {"pmean": {"alpha": alpha}})
    elif cmd == "budget":
        block = dict(cfg.doc.get("algorithm", {}).get("budget", {}))
        if args.K is not None:
            block["K"] = args.K
        if args.p0 is not None:
            block["p0"] = args.p0
        if "K" not in block:
            raise ConfigError("/algorithm/budget/K", "K is required (config or --K)")
        manifest = run(cfg, {"budget": block})
    elif cmd == "sweep":
        block = dict(cfg.doc.get("algorithm", {}).get("sweep", {}))
        if args.alphas is not None:
            block["alphas"] = args.alphas
        manifest = run(cfg, {"sweep": block})
    elif cmd == "baseline":
        ctx = prepare(cfg)
        block = copy.deepcopy(cfg.doc.get("baselines") or {"random_policy": {}, "random_p": {}})
        if args.trials is not None:
            for method in block.values():
                method["trials"] = args.trials
        targets = [(K, args.p0, _grid(cfg, [], ctx.env.n_rewards, args.p0)) for K in args.K]
        try:
            stage_baselines(ctx, block, targets)
        except DomainError as e:
            raise ConfigError("/baselines", str(e)) from None
        manifest = finish(ctx, started)
    elif cmd == "evaluate":
        port = _load_portfolio(args.portfolio)
        ctx = prepare(cfg)
        unknown = [pid for pid in port.policy_ids if pid not in set(ctx.oracle.policy_ids)]
        if unknown:
            raise ConfigError("/portfolio", f"policies not in the class: {unknown[:5]}")
        grid = _grid(cfg, [port.alpha] if port.alpha else [], ctx.env.n_rewards)
        report = approximation_factor(port, ctx.oracle, *grid)
        ctx.out.write("eval.csv", report.to_csv())
        ctx.rows.append(ComparisonRow(port.size, port.algorithm, report.q_min, 0.0, port.oracle_calls))
        manifest = finish(ctx, started)
    elif cmd == "breakdown":
        ctx = prepare(cfg)
        ids = _load_portfolio(args.portfolio).policy_ids if args.portfolio else ctx.oracle.policy_ids
        groups: Any = args.groups
        if groups == "all" and "breakdown" in cfg.doc:
            groups = cfg.doc["breakdown"]["groups"]
        stage_breakdown(ctx, ids, {"groups": groups, "baseline": args.baseline, "svg": args.svg})
        manifest = finish(ctx, started)
    else:
        env = build_environment(cfg)
        out = OutputDir(cfg.output)
        if args.env_command == "build":
            if env.mdp is None:
                raise EnvironmentRefused("this environment has no tabulated form; set environment.mode to exact")
            save_mdp(env.mdp, out.root / "mdp.json")
            out.record("mdp.json")
        else:
            if env.mdp is None:
                raise ConfigError("/environment", "policy tables need a tabulated environment")
            save_policy_set(build_policies(cfg, env), out.root / "policies.json")
            out.record("policies.json")
        manifest = RunManifest(cfg.hash(), __version__, round(time.monotonic() - started, 3), {}, dict(out.files))
        (out.root / MANIFEST).write_text(_canonical_json(manifest.to_json()))
    for name in sorted(manifest.files):
        print(f"wrote {Path(cfg.output) / name}")
    if (cfg.output / "comparison.csv").exists() and "comparison.csv" in manifest.files:
        print((cfg.output / "comparison.csv").read_text(), end="")
    return manifest.exit_code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _command(args)
    except ConfigError as e:
        print(f"config error at {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvironmentRefused, PathCapExceeded) as e:
        print(f"environment refused: {e}", file=sys.stderr)
        return EXIT_ENVIRONMENT


if __name__ == "__main__":
    raise SystemExit(main())
