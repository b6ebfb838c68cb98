"""Experiment configuration, the multi-run simulation loop and its reports.

A configuration is a JSON document::

    {
      "environment": {"kind": "synthetic", "users": 200, "items": 50},
      "policies": [{"kind": "banditlp"}, {"kind": "nn_lp"}],
      "rounds": 30, "runs": 20, "seed": 0
    }

Every omitted field takes its documented default; :func:`effective_config`
returns the fully materialized document.  Each run builds its environment
from a run seed, fits every policy on the same biased log and then plays the
same rounds for all policies, each policy learning only from its own
feedback.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .bayes_models import MlpSpec, TrainSchedule
from .environments import (
    LoggedDataset,
    ReplayConfig,
    ReplayEnvironment,
    SyntheticConfig,
    SyntheticEnvironment,
    make_logged_dataset,
)
from .lp_solver import AllocationProblem
from .policies import (
    HEAD_NAMES,
    NNLP,
    NNTS,
    POLICY_KINDS,
    BanditLP,
    HeadConfig,
    LinUCBLP,
    LpSettings,
    Policy,
    RandomPolicy,
    RowSpec,
    assemble_problem,
    standard_rows,
)
from .rng import TAG_ENV, TAG_POLICY, stream

logger = logging.getLogger(__name__)

Z95 = 1.96


class SchemaError(ValueError):
    """Invalid configuration; ``path`` locates the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# ------------------------------------------------------------------ schema helpers

def _check_keys(doc: Any, allowed: Iterable[str], path: str) -> dict:
    if not isinstance(doc, Mapping):
        raise SchemaError(path, "expected an object")
    allowed = set(allowed)
    for key in doc:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}", "unknown key")
    return dict(doc)


def _field_names(cls, exclude=()) -> list[str]:
    return [f.name for f in dataclasses.fields(cls) if f.name not in exclude]


def _construct(cls, values: dict, path: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise SchemaError(path, str(exc)) from None


def _positive_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise SchemaError(path, f"expected an integer >= 1, got {value!r}")
    return value


# ------------------------------------------------------------------ environment

GENERATE_DEFAULTS = {"num_users": 2000, "num_items": 10, "dim": 5, "rows_per_user": 3, "seed": 0}


@dataclass(frozen=True)
class EnvironmentSpec:
    """Synthetic generator settings, or a logged dataset plus replay settings.

    ``seed`` fields of the underlying configs are replaced per run.
    """

    kind: str = "synthetic"
    synthetic: SyntheticConfig | None = None
    replay: ReplayConfig | None = None
    path: str | None = None
    max_users: int = 10_000
    generate: dict = field(default_factory=lambda: dict(GENERATE_DEFAULTS))

    @property
    def reward_head(self) -> str:
        return "binary" if self.kind == "replay" else "gaussian"

    def dataset(self) -> LoggedDataset:
        if self.path is not None:
            return LoggedDataset.from_csv(self.path, self.max_users, rng=self.generate.get("seed", 0))
        return make_logged_dataset(**self.generate)

    def build(self, seed: int, dataset: LoggedDataset | None = None):
        if self.kind == "synthetic":
            return SyntheticEnvironment(dataclasses.replace(self.synthetic, seed=seed))
        return ReplayEnvironment(dataset if dataset is not None else self.dataset(),
                                 dataclasses.replace(self.replay, seed=seed))

    def to_dict(self) -> dict:
        if self.kind == "synthetic":
            out = dataclasses.asdict(self.synthetic)
            out.pop("seed")
            return {"kind": "synthetic", **{k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}}
        out = dataclasses.asdict(self.replay)
        out.pop("seed")
        out["cost_shape"] = list(out["cost_shape"])
        return {"kind": "replay", "path": self.path, "max_users": self.max_users,
                "generate": dict(self.generate), **out}


def parse_environment(doc: Any, path: str = "environment") -> EnvironmentSpec:
    doc = _check_keys(doc if doc is not None else {}, ["kind", *_field_names(SyntheticConfig),
                                                        *_field_names(ReplayConfig), "path",
                                                        "max_users", "generate"], path)
    kind = doc.pop("kind", "synthetic")
    if kind == "synthetic":
        _check_keys(doc, _field_names(SyntheticConfig, ("seed",)), path)
        return EnvironmentSpec("synthetic", synthetic=_construct(SyntheticConfig, doc, path))
    if kind == "replay":
        _check_keys(doc, [*_field_names(ReplayConfig, ("seed",)), "path", "max_users", "generate"], path)
        data_path = doc.pop("path", None)
        max_users = _positive_int(doc.pop("max_users", 10_000), f"{path}.max_users")
        gen = _check_keys(doc.pop("generate", {}) or {}, GENERATE_DEFAULTS, f"{path}.generate")
        gen = {**GENERATE_DEFAULTS, **gen}
        return EnvironmentSpec("replay", replay=_construct(ReplayConfig, doc, path),
                               path=data_path, max_users=max_users, generate=gen)
    raise SchemaError(f"{path}.kind", f"expected 'synthetic' or 'replay', got {kind!r}")


# ------------------------------------------------------------------ policies

@dataclass(frozen=True)
class HeadSpec:
    """Network, prior and training settings for one estimated quantity."""

    hidden_layer_sizes: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    prior_variance: float = 1.0
    noise_variance: float = 0.1
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-2
    refresh_steps: int = 100
    calibrate: bool | None = None
    center: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))

    def head_config(self, input_dim: int, head: str) -> HeadConfig:
        spec = MlpSpec(input_dim, self.hidden_layer_sizes, self.activation, head,
                       self.prior_variance, self.noise_variance)
        first = TrainSchedule(self.epochs, self.batch_size, self.learning_rate)
        refresh = TrainSchedule(self.epochs, self.batch_size, self.learning_rate, steps=self.refresh_steps)
        return HeadConfig(spec, first, refresh, self.calibrate, self.center)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden_layer_sizes"] = list(self.hidden_layer_sizes)
        return out


def default_head(reward_head: str, head: str) -> HeadSpec:
    """Default per-head settings.

    The prior variance is also the floor of the predictive variance, so it
    is set relative to each target's scale: logits for a binary reward,
    rewards of order 1 to 6 for the gaussian reward, and costs that vary by
    about 0.1 around 1.
    """
    if head == "reward":
        return HeadSpec(prior_variance=1.0 if reward_head == "binary" else 1e-2)
    return HeadSpec(prior_variance=1e-4)


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    name: str
    heads: dict[str, HeadSpec]
    tau: float = 1.0
    cost_tau: float | None = None
    alpha: float = 1.0
    reg: float = 1.0
    lp: LpSettings = field(default_factory=LpSettings)
    user_cap: int | None = None

    def build(self, env, rows: Sequence[RowSpec], seed: int) -> Policy:
        cap = self.user_cap if self.user_cap is not None else env.user_cap
        dim = env.feature_dim
        if self.kind == "random":
            return RandomPolicy(self.name, cap)
        if self.kind == "linucb_lp":
            return LinUCBLP(dim, rows, cap, self.name, self.alpha, self.reg, lp=self.lp)
        heads = {}
        for h, hs in self.heads.items():
            head_type = env.reward_head if h == "reward" else "gaussian"
            heads[h] = hs.head_config(dim, head_type)
        if self.kind == "banditlp":
            return BanditLP(heads, rows, cap, self.name, seed, self.lp, self.tau, self.cost_tau)
        if self.kind == "nn_lp":
            return NNLP(heads, rows, cap, self.name, seed, self.lp)
        return NNTS(heads, rows, cap, self.name, seed, self.lp, self.tau)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "tau": self.tau, "cost_tau": self.cost_tau,
                "alpha": self.alpha, "reg": self.reg, "user_cap": self.user_cap,
                "lp": dataclasses.asdict(self.lp),
                "heads": {h: hs.to_dict() for h, hs in self.heads.items()}}


DEFAULT_POLICIES = ("banditlp", "nnts", "linucb_lp", "nn_lp")


def parse_policy(doc: Any, reward_head: str, path: str) -> PolicySpec:
    doc = _check_keys(doc, _field_names(PolicySpec), path)
    kind = doc.get("kind")
    if kind not in POLICY_KINDS:
        raise SchemaError(f"{path}.kind", f"expected one of {list(POLICY_KINDS)}, got {kind!r}")
    name = doc.get("name") or kind
    head_docs = _check_keys(doc.get("heads", {}) or {}, HEAD_NAMES, f"{path}.heads")
    heads = {}
    for h in HEAD_NAMES:
        base = dataclasses.asdict(default_head(reward_head, h))
        over = _check_keys(head_docs.get(h, {}) or {}, base, f"{path}.heads.{h}")
        heads[h] = _construct(HeadSpec, {**base, **over}, f"{path}.heads.{h}")
    lp_doc = _check_keys(doc.get("lp", {}) or {}, _field_names(LpSettings), f"{path}.lp")
    lp = _construct(LpSettings, lp_doc, f"{path}.lp")
    values = {k: doc[k] for k in ("tau", "cost_tau", "alpha", "reg", "user_cap") if k in doc}
    spec = _construct(PolicySpec, {"kind": kind, "name": name, "heads": heads, "lp": lp, **values}, path)
    if spec.tau < 0 or (spec.cost_tau is not None and spec.cost_tau < 0):
        raise SchemaError(f"{path}.tau", "temperatures must be non-negative")
    if spec.alpha < 0:
        raise SchemaError(f"{path}.alpha", "alpha must be non-negative")
    if spec.reg <= 0:
        raise SchemaError(f"{path}.reg", "reg must be positive")
    if spec.user_cap is not None:
        _positive_int(spec.user_cap, f"{path}.user_cap")
    return spec


# ------------------------------------------------------------------ experiment config

@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentSpec
    policies: tuple[PolicySpec, ...]
    rounds: int
    runs: int
    seed: int = 0
    log_rounds: int = 1
    output: str | None = None

    def to_dict(self) -> dict:
        return {"environment": self.environment.to_dict(),
                "policies": [p.to_dict() for p in self.policies],
                "rounds": self.rounds, "runs": self.runs, "seed": self.seed,
                "log_rounds": self.log_rounds, "output": self.output}


DEFAULT_HORIZON = {"synthetic": (30, 50), "replay": (50, 20)}
_TOP_KEYS = ("environment", "policies", "rounds", "runs", "seed", "log_rounds", "output")


def config_from_dict(doc: Any) -> ExperimentConfig:
    doc = _check_keys(doc, _TOP_KEYS, "$")
    env = parse_environment(doc.get("environment"), "$.environment")
    rounds_default, runs_default = DEFAULT_HORIZON[env.kind]
    rounds = _positive_int(doc.get("rounds", rounds_default), "$.rounds")
    runs = _positive_int(doc.get("runs", runs_default), "$.runs")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SchemaError("$.seed", f"expected a non-negative integer, got {seed!r}")
    log_rounds = _positive_int(doc.get("log_rounds", 1), "$.log_rounds")
    pol_docs = doc.get("policies")
    if pol_docs is None:
        pol_docs = [{"kind": k} for k in DEFAULT_POLICIES]
    if not isinstance(pol_docs, list) or not pol_docs:
        raise SchemaError("$.policies", "expected a non-empty list")
    policies = tuple(parse_policy(p, env.reward_head, f"$.policies[{k}]") for k, p in enumerate(pol_docs))
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise SchemaError("$.policies", f"policy names must be unique, got {names}")
    if "logging" in names:
        raise SchemaError("$.policies", "'logging' is reserved")
    output = doc.get("output")
    if output is not None and not isinstance(output, str):
        raise SchemaError("$.output", "expected a path string")
    return ExperimentConfig(env, policies, rounds, runs, seed, log_rounds, output)


def load_document(path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"not valid JSON: {exc}") from None


def parse_config(path):
    """Read a configuration file: an experiment, or an ``email`` allocation scenario."""
    doc = load_document(path)
    if isinstance(doc, Mapping) and "scenario" in doc:
        return EmailScenario.from_dict(doc)
    return config_from_dict(doc)


def effective_config(config: ExperimentConfig) -> dict:
    return config.to_dict()


# ------------------------------------------------------------------ running

@dataclass
class RoundRecord:
    policy: str
    run: int
    round: int
    reward: float
    cumulative_reward: float
    global_violation: float
    provider_violations: tuple[float, ...]
    selected: int
    solver_iterations: int = 0
    solver_converged: bool = True
    error: str | None = None

    @property
    def provider_violation_max(self) -> float:
        return max(self.provider_violations) if self.provider_violations else math.nan


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    records: list[RoundRecord]
    errors: list[str] = field(default_factory=list)

    @property
    def policies(self) -> list[str]:
        return [p.name for p in self.config.policies]

    def final_cumulative(self, policy: str) -> np.ndarray:
        """Cumulative reward at the last round, one value per run."""
        last = self.config.rounds - 1
        vals = {r.run: r.cumulative_reward for r in self.records if r.policy == policy and r.round == last}
        return np.array([vals.get(s, math.nan) for s in range(self.config.runs)])

    def summary(self) -> list["SummaryRow"]:
        return aggregate(self.records)


def run_seed(seed: int, run: int) -> int:
    return int(stream(TAG_ENV, seed, run).integers(2**31))


def _violations(rnd, chosen, targets):
    c1 = float(rnd.cost1[chosen].sum())
    per = np.bincount(rnd.providers[np.nonzero(chosen)[1]], weights=rnd.cost2[chosen],
                      minlength=len(targets.provider_budgets))
    return c1 - targets.global_budget, tuple(float(v) for v in per - targets.provider_budgets)


def run_experiment(config: ExperimentConfig, runs: Sequence[int] | None = None) -> ExperimentReport:
    """Play every policy for ``config.rounds`` rounds in each run; deterministic given the config."""
    dataset = config.environment.dataset() if config.environment.kind == "replay" else None
    records: list[RoundRecord] = []
    errors: list[str] = []
    for run in (range(config.runs) if runs is None else runs):
        rs = run_seed(config.seed, run)
        env = config.environment.build(rs, dataset)
        targets = env.compute_constraint_targets()
        rows = standard_rows(targets, env.providers)
        log = env.biased_logging_data(rounds=config.log_rounds)
        live: dict[str, Policy] = {}
        for k, spec in enumerate(config.policies):
            try:
                live[spec.name] = spec.build(env, rows, rs * 31 + k).fit(log)
            except Exception as exc:  # noqa: BLE001 - recorded, the run continues
                errors.append(f"run {run} {spec.name} fit: {exc!r}")
                logger.warning("run %d: %s failed to fit: %s", run, spec.name, exc)
        cumulative = {name: 0.0 for name in live}
        for t in range(config.rounds):
            rnd = env.gen_round(t)
            for k, spec in enumerate(config.policies):
                pol = live.get(spec.name)
                if pol is None:
                    continue
                try:
                    dec = pol.select(rnd, stream(TAG_POLICY, rs, t, k))
                    fb = rnd.feedback(dec.chosen, pol.name)
                    pol.update(fb)
                except Exception as exc:  # noqa: BLE001
                    errors.append(f"run {run} round {t} {spec.name}: {exc!r}")
                    logger.warning("run %d round %d: %s failed: %s", run, t, spec.name, exc)
                    del live[spec.name]
                    continue
                reward = float(fb.reward.sum())
                cumulative[pol.name] += reward
                g, per = _violations(rnd, dec.chosen, targets)
                records.append(RoundRecord(pol.name, run, t, reward, cumulative[pol.name], g, per,
                                           int(dec.chosen.sum()), dec.solver_iterations,
                                           dec.solver_converged, dec.error))
        logger.info("run %d done", run)
    return ExperimentReport(config, records, errors)


# ------------------------------------------------------------------ aggregation

@dataclass(frozen=True)
class SummaryRow:
    policy: str
    round: int
    metric: str
    mean: float
    lower: float
    upper: float
    n: int


def mean_ci(values) -> tuple[float, float, float]:
    """Mean and normal-approximation 95% interval; zero width for one value."""
    v = np.asarray(values, float)
    v = v[np.isfinite(v)]
    if len(v) == 0:
        return math.nan, math.nan, math.nan
    m = float(v.mean())
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(len(v)) if len(v) > 1 else 0.0
    return m, m - half, m + half


def _metrics(rec: RoundRecord) -> dict[str, float]:
    out = {"reward": rec.reward, "cumulative_reward": rec.cumulative_reward,
           "global_violation": rec.global_violation,
           "provider_violation_max": rec.provider_violation_max}
    for l, v in enumerate(rec.provider_violations):
        out[f"provider_{l}_violation"] = v
    return out


def aggregate(records: Iterable[RoundRecord]) -> list[SummaryRow]:
    """Cross-run mean and 95% interval per (policy, round, metric), in first-seen order."""
    groups: dict[tuple[str, int, str], list[float]] = {}
    for rec in records:
        for metric, value in _metrics(rec).items():
            groups.setdefault((rec.policy, rec.round, metric), []).append(value)
    out = []
    for (policy, rnd, metric), values in groups.items():
        m, lo, hi = mean_ci(values)
        out.append(SummaryRow(policy, rnd, metric, m, lo, hi, len(values)))
    return out


def series(summary: Sequence[SummaryRow], policy: str, metric: str) -> list[SummaryRow]:
    return sorted((r for r in summary if r.policy == policy and r.metric == metric), key=lambda r: r.round)


# ------------------------------------------------------------------ output

RAW_FIELDS = ["policy", "run", "round", "reward", "cumulative_reward", "global_violation",
              "provider_violation_max", "provider_violations", "selected", "solver_iterations",
              "solver_converged", "error"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ";".join(repr(x) for x in v)
    return "" if v is None else str(v)


def write_report(report: ExperimentReport, directory) -> dict[str, Path]:
    """Write ``rounds.csv``, ``summary.csv`` and ``config.json``; returns the paths."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"rounds": out / "rounds.csv", "summary": out / "summary.csv", "config": out / "config.json"}
    with open(paths["rounds"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_FIELDS)
        for r in report.records:
            w.writerow([_fmt(getattr(r, f)) for f in RAW_FIELDS])
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "round", "metric", "mean", "ci_lower", "ci_upper", "n"])
        for s in report.summary():
            w.writerow([s.policy, s.round, s.metric, _fmt(s.mean), _fmt(s.lower), _fmt(s.upper), s.n])
    doc = {"effective_config": effective_config(report.config), "errors": report.errors}
    paths["config"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return paths


# ------------------------------------------------------------------ email allocation scenario

@dataclass
class EmailScenario:
    """One round of email allocation.

    Maximize expected value ``conv * ltv`` subject to an unsubscribe budget,
    a minimum number of sends for each item group (e.g. B2B and B2C
    campaigns) and a per-user frequency cap.  ``ltv`` is an input column.
    """

    conv: np.ndarray
    ltv: np.ndarray
    unsub: np.ndarray
    groups: dict[str, tuple[int, ...]]
    min_sends: dict[str, float]
    unsub_budget: float
    fcap: int = 1
    lp: LpSettings = field(default_factory=LpSettings)

    def __post_init__(self):
        self.conv, self.ltv, self.unsub = (np.asarray(a, float) for a in (self.conv, self.ltv, self.unsub))
        if not (self.conv.shape == self.ltv.shape == self.unsub.shape) or self.conv.ndim != 2:
            raise SchemaError("$", "conv, ltv and unsub must be matrices of one shape")
        for g in self.min_sends:
            if g not in self.groups:
                raise SchemaError(f"$.min_sends.{g}", "no such group")
        if self.fcap < 1:
            raise SchemaError("$.fcap", "must be >= 1")

    def rows(self) -> list[RowSpec]:
        rows = [RowSpec("unsub", "unsub", float(self.unsub_budget))]
        for g, need in self.min_sends.items():
            rows.append(RowSpec(f"min_sends_{g}", "ones", -float(need), tuple(self.groups[g]), sign=-1.0))
        return rows

    def problem(self) -> AllocationProblem:
        return assemble_problem(self.conv * self.ltv, {"unsub": self.unsub}, self.rows(), self.fcap, self.lp)

    @classmethod
    def from_dict(cls, doc: Any) -> "EmailScenario":
        keys = ("scenario", "conv", "ltv", "unsub", "groups", "min_sends", "unsub_budget", "fcap", "lp")
        doc = _check_keys(doc, keys, "$")
        if doc.get("scenario") != "email":
            raise SchemaError("$.scenario", f"expected 'email', got {doc.get('scenario')!r}")
        for k in ("conv", "ltv", "unsub", "groups", "min_sends", "unsub_budget"):
            if k not in doc:
                raise SchemaError(f"$.{k}", "required")
        groups = doc["groups"]
        if not isinstance(groups, Mapping) or not groups:
            raise SchemaError("$.groups", "expected an object of item lists")
        min_sends = _check_keys(doc["min_sends"], groups, "$.min_sends")
        lp = _construct(LpSettings, _check_keys(doc.get("lp", {}) or {}, _field_names(LpSettings), "$.lp"), "$.lp")
        return cls(doc["conv"], doc["ltv"], doc["unsub"],
                   {g: tuple(int(i) for i in items) for g, items in groups.items()},
                   {g: float(v) for g, v in min_sends.items()},
                   float(doc["unsub_budget"]), int(doc.get("fcap", 1)), lp)

    def to_dict(self) -> dict:
        return {"scenario": "email", "conv": self.conv.tolist(), "ltv": self.ltv.tolist(),
                "unsub": self.unsub.tolist(), "groups": {g: list(v) for g, v in self.groups.items()},
                "min_sends": dict(self.min_sends), "unsub_budget": self.unsub_budget,
                "fcap": self.fcap, "lp": dataclasses.asdict(self.lp)}


def email_template(users: int = 50, items: int = 6, seed: int = 0) -> dict:
    """A feasible example scenario: half the items are B2B, half B2C."""
    rng = stream(TAG_ENV, seed, 7)
    conv = rng.beta(2.0, 18.0, (users, items)) * 1e-2
    unsub = rng.beta(1.0, 9.0, (users, items)) * 1e-1
    ltv = rng.gamma(2.0, 150.0, (users, items))
    half = items // 2
    groups = {"b2b": list(range(half)), "b2c": list(range(half, items))}
    return {"scenario": "email", "conv": conv.tolist(), "ltv": ltv.tolist(), "unsub": unsub.tolist(),
            "groups": groups, "min_sends": {"b2b": 0.2 * users, "b2c": 0.2 * users},
            "unsub_budget": float(0.6 * users * unsub.mean()), "fcap": 1}


# ------------------------------------------------------------------ ablation documents

def ablation_config_from_dict(doc: Any):
    """Validate an ablation document; ``output`` is accepted and returned separately."""
    from .ablation import AblationConfig

    doc = _check_keys(doc if doc is not None else {}, [*_field_names(AblationConfig), "output"], "$")
    output = doc.pop("output", None)
    for key in ("users", "items", "runs"):
        if key in doc:
            _positive_int(doc[key], f"$.{key}")
    return _construct(AblationConfig, doc, "$"), output
