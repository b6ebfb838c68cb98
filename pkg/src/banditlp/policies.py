"""Decision rules mapping a round's contexts to per-user action sets.

* :class:`BanditLP` draws Thompson samples of reward and costs from Laplace
  posteriors and solves the per-round LP.
* :class:`NNLP` plugs posterior means into the same LP (no exploration).
* :class:`NNTS` takes each user's top items by a Thompson-sampled reward and
  ignores the coupling constraints.
* :class:`LinUCBLP` uses ridge-regression estimates with an optimistic reward
  bonus inside the LP.
* :class:`RandomPolicy` picks uniformly; it is the reference for constraint
  targets.

Every policy owns its training log and only ever learns from feedback on its
own decisions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bayes_models import MlpSpec, PosteriorModel, TrainSchedule
from .calibration import IsotonicModel, calibrate_ts_batch, fit_isotonic
from .environments import ConstraintTargets, EnvironmentRound, LoggedBatch
from .lp_solver import (
    AllocationProblem,
    GlobalRow,
    InfeasibleSuspected,
    SolverConfig,
    default_gamma,
    solve,
)
from .rng import as_generator

logger = logging.getLogger(__name__)

POLICY_KINDS = ("banditlp", "nnts", "linucb_lp", "nn_lp", "random")
HEAD_NAMES = ("reward", "cost1", "cost2")


@dataclass(frozen=True)
class RowSpec:
    """One coupling row ``sum_{u, i in items} sign * table[u, i] * x[u, i] <= bound``.

    ``table`` names an estimate table (``"cost1"``, ``"cost2"``, ...) or
    ``"ones"`` for a plain selection count.  A negative ``sign`` with a
    negative bound expresses a minimum, e.g. ``-sum x <= -C``.
    """

    label: str
    table: str
    bound: float
    items: tuple[int, ...] | None = None
    sign: float = 1.0


def standard_rows(targets: ConstraintTargets, providers: np.ndarray) -> list[RowSpec]:
    """Global cost row plus one per-provider cost row."""
    rows = [RowSpec("global", "cost1", float(targets.global_budget))]
    for l, budget in enumerate(targets.provider_budgets):
        items = tuple(int(i) for i in np.flatnonzero(providers == l))
        rows.append(RowSpec(f"provider_{l}", "cost2", float(budget), items))
    return rows


@dataclass(frozen=True)
class LpSettings:
    gamma_relative: float = 1e-3
    max_iters: int = 5000
    eps_feas: float = 1e-6
    eps_gap: float = 1e-4
    lambda_ceiling: float = 1e9
    stall_window: int = 50

    def solver_config(self) -> SolverConfig:
        return SolverConfig(max_iters=self.max_iters, eps_feas=self.eps_feas, eps_gap=self.eps_gap,
                            lambda_ceiling=self.lambda_ceiling, stall_window=self.stall_window)


def assemble_problem(objective: np.ndarray, tables: Mapping[str, np.ndarray],
                     rows: Sequence[RowSpec], user_cap: float,
                     settings: LpSettings | None = None) -> AllocationProblem:
    """Build the per-round LP ``max objective . x`` in solver (minimization) form.

    Rows with an infinite bound are dropped (they can never bind).
    """
    settings = settings or LpSettings()
    objective = np.asarray(objective, float)
    U, I = objective.shape
    built = []
    for spec in rows:
        if not math.isfinite(spec.bound):
            if spec.bound > 0:
                continue
            raise ValueError(f"row {spec.label!r} has bound {spec.bound}")
        table = np.ones((U, I)) if spec.table == "ones" else np.asarray(tables[spec.table], float)
        mask = None
        if spec.items is not None:
            mask = np.zeros((U, I), bool)
            mask[:, list(spec.items)] = True
        built.append(GlobalRow.from_dense(spec.sign * table, spec.bound, spec.label, mask))
    c = -objective
    return AllocationProblem(c, built, np.ones((U, I)), np.full(U, float(user_cap)),
                             default_gamma(c, settings.gamma_relative))


def realize(x: np.ndarray, cap: int, rng) -> np.ndarray:
    """Independent Bernoulli(x) picks, trimmed to the ``cap`` largest ``x`` per user."""
    rng = as_generator(rng)
    chosen = rng.random(x.shape) < x
    over = np.flatnonzero(chosen.sum(axis=1) > cap)
    for u in over:
        picked = np.flatnonzero(chosen[u])
        keep = picked[np.argsort(-x[u, picked], kind="stable")[:cap]]
        chosen[u] = False
        chosen[u, keep] = True
    return chosen


def split_round_stream(rng):
    """Independent (sampling, realization) generators derived from a round stream."""
    sample, realization = as_generator(rng).spawn(2)
    return sample, realization


def top_cap(scores: np.ndarray, cap: int) -> np.ndarray:
    """Boolean mask of each row's ``cap`` highest scores (ties to the lower index)."""
    U, I = scores.shape
    chosen = np.zeros((U, I), bool)
    if cap <= 0:
        return chosen
    idx = np.argsort(-scores, axis=1, kind="stable")[:, :min(cap, I)]
    chosen[np.arange(U)[:, None], idx] = True
    return chosen


@dataclass
class RoundDecision:
    chosen: np.ndarray
    x: np.ndarray | None = None
    estimates: dict[str, np.ndarray] = field(default_factory=dict)
    solver_iterations: int = 0
    solver_converged: bool = True
    error: str | None = None

    def audit(self) -> dict:
        return {"selected": int(self.chosen.sum()), "solver_iterations": self.solver_iterations,
                "solver_converged": self.solver_converged, "error": self.error}


class Policy:
    """Base class: ``fit`` on an initial log, ``select`` per round, ``update`` on own feedback."""

    kind = "base"

    def __init__(self, name: str | None = None, user_cap: int = 2):
        self.name = name or self.kind
        self.user_cap = int(user_cap)
        self.seen_sources: set[str] = set()

    def fit(self, log: LoggedBatch) -> "Policy":
        return self

    def select(self, rnd: EnvironmentRound, rng) -> RoundDecision:
        raise NotImplementedError

    def update(self, batch: LoggedBatch) -> "Policy":
        return self

    def _check_source(self, batch: LoggedBatch):
        # structural guard for data diversion: feedback must come from this policy's decisions
        if batch.source and batch.source not in ("logging", self.name):
            raise RuntimeError(f"policy {self.name!r} received feedback from {batch.source!r}")
        self.seen_sources.add(batch.source)


class RandomPolicy(Policy):
    kind = "random"

    def select(self, rnd, rng):
        rng = as_generator(rng)
        return RoundDecision(top_cap(rng.random((rnd.num_users, rnd.num_items)), self.user_cap))

    def update(self, batch):
        self._check_source(batch)
        return self


@dataclass
class HeadConfig:
    """How the posterior model of one head is built and trained."""

    spec: MlpSpec
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    refresh: TrainSchedule | None = None
    calibrate: bool | None = None  # default: calibrate binary heads
    center: bool = True  # gaussian heads learn residuals around the initial target mean


class NeuralPolicy(Policy):
    """Shared state for the neural agents: one posterior model per head."""

    def __init__(self, heads: Mapping[str, HeadConfig], rows: Sequence[RowSpec] = (),
                 user_cap: int = 2, name: str | None = None, seed: int = 0,
                 lp: LpSettings | None = None):
        super().__init__(name, user_cap)
        self.head_configs = dict(heads)
        self.rows = list(rows)
        self.lp = lp or LpSettings()
        self.models: dict[str, PosteriorModel] = {}
        self.calibrators: dict[str, IsotonicModel | None] = {}
        for k, (head, cfg) in enumerate(self.head_configs.items()):
            self.models[head] = PosteriorModel(cfg.spec, cfg.schedule, cfg.refresh, seed=seed * 101 + k,
                                               center=cfg.center)
            self.calibrators[head] = None

    def _targets(self, batch: LoggedBatch, head: str) -> np.ndarray:
        return getattr(batch, head)

    def _refit_calibration(self):
        for head, cfg in self.head_configs.items():
            wanted = cfg.calibrate if cfg.calibrate is not None else cfg.spec.head == "binary"
            pm = self.models[head]
            if wanted and pm.state is not None:
                # fitted on exploit-mode scores only
                self.calibrators[head] = fit_isotonic(pm.predict_mean(pm.Z), pm.y)

    def fit(self, log: LoggedBatch):
        self._check_source(log)
        for head, pm in self.models.items():
            pm.fit(log.features, self._targets(log, head))
        self._refit_calibration()
        return self

    def update(self, batch: LoggedBatch):
        self._check_source(batch)
        if len(batch) == 0:
            return self
        for head, pm in self.models.items():
            pm.update(batch.features, self._targets(batch, head))
        self._refit_calibration()
        return self

    def _estimate(self, head: str, Z: np.ndarray, rng, tau: float | None) -> np.ndarray:
        """Posterior mean (``tau is None``) or a Thompson draw, calibrated when configured."""
        pm = self.models[head]
        out = pm.predict_mean(Z) if tau is None else pm.predictive_sample(Z, rng, tau).output
        cal = self.calibrators.get(head)
        return calibrate_ts_batch(cal, out) if cal is not None else out

    def _lp_decision(self, rnd: EnvironmentRound, est: dict[str, np.ndarray], rng) -> RoundDecision:
        try:
            problem = assemble_problem(est["reward"], est, self.rows, self.user_cap, self.lp)
            sol = solve(problem, self.lp.solver_config())
        except InfeasibleSuspected as exc:
            logger.warning("%s: round %d skipped: %s", self.name, rnd.t, exc)
            return RoundDecision(np.zeros((rnd.num_users, rnd.num_items), bool), None, est,
                                 error=f"InfeasibleSuspected: {exc}", solver_converged=False)
        chosen = realize(sol.x, self.user_cap, rng)
        return RoundDecision(chosen, sol.x, est, sol.iterations, sol.converged)


class BanditLP(NeuralPolicy):
    kind = "banditlp"

    def __init__(self, heads, rows=(), user_cap=2, name=None, seed=0, lp=None,
                 tau: float = 1.0, cost_tau: float | None = None):
        super().__init__(heads, rows, user_cap, name, seed, lp)
        if tau < 0 or (cost_tau is not None and cost_tau < 0):
            raise ValueError("temperatures must be non-negative")
        self.tau = float(tau)
        self.cost_tau = self.tau if cost_tau is None else float(cost_tau)

    def select(self, rnd, rng):
        sample_rng, realize_rng = split_round_stream(rng)
        Z = rnd.features()
        shape = (rnd.num_users, rnd.num_items)
        est = {}
        for head in self.models:
            tau = self.tau if head == "reward" else self.cost_tau
            est[head] = self._estimate(head, Z, sample_rng, tau).reshape(shape)
        return self._lp_decision(rnd, est, realize_rng)


class NNLP(NeuralPolicy):
    kind = "nn_lp"

    def select(self, rnd, rng):
        Z = rnd.features()
        shape = (rnd.num_users, rnd.num_items)
        est = {head: self._estimate(head, Z, None, None).reshape(shape) for head in self.models}
        return self._lp_decision(rnd, est, split_round_stream(rng)[1])


class NNTS(NeuralPolicy):
    """Top items per user by a Thompson-sampled reward; constraints are ignored."""

    kind = "nnts"

    def __init__(self, heads, rows=(), user_cap=2, name=None, seed=0, lp=None, tau: float = 1.0):
        heads = {"reward": heads["reward"]}
        super().__init__(heads, (), user_cap, name, seed, lp)
        self.tau = float(tau)

    def select(self, rnd, rng):
        sample_rng, _ = split_round_stream(rng)
        r = self._estimate("reward", rnd.features(), sample_rng, self.tau).reshape(rnd.num_users, rnd.num_items)
        return RoundDecision(top_cap(r, self.user_cap), None, {"reward": r})


class LinUCBState:
    """Ridge statistics ``A = reg I + sum z z^T`` and ``b = sum z y`` for one head."""

    def __init__(self, dim: int, reg: float = 1.0):
        if reg <= 0:
            raise ValueError("reg must be positive")
        self.reg = float(reg)
        self.A = np.eye(dim) * reg
        self.A_inv = np.eye(dim) / reg
        self.b = np.zeros(dim)

    @property
    def theta(self) -> np.ndarray:
        return self.A_inv @ self.b

    def add(self, Z: np.ndarray, y: np.ndarray) -> None:
        Z = np.atleast_2d(np.asarray(Z, float))
        y = np.atleast_1d(np.asarray(y, float))
        self.A += Z.T @ Z
        self.b += Z.T @ y
        if len(Z) <= 4:
            for z in Z:
                Az = self.A_inv @ z
                self.A_inv -= np.outer(Az, Az) / (1.0 + z @ Az)
        else:
            self.A_inv = np.linalg.inv(self.A)

    def mean(self, Z) -> np.ndarray:
        return np.asarray(Z, float) @ self.theta

    def width(self, Z) -> np.ndarray:
        Z = np.asarray(Z, float)
        return np.sqrt(np.maximum(np.einsum("nd,de,ne->n", Z, self.A_inv, Z), 0.0))

    def ucb(self, Z, alpha: float) -> np.ndarray:
        return self.mean(Z) + alpha * self.width(Z)


class LinUCBLP(Policy):
    """Optimistic linear reward, point-estimate linear costs, LP allocation.

    A constant feature is appended to the joint context so every head has an
    intercept.
    """

    kind = "linucb_lp"

    def __init__(self, dim: int, rows=(), user_cap=2, name=None, alpha: float = 1.0,
                 reg: float = 1.0, heads: Sequence[str] = HEAD_NAMES, lp: LpSettings | None = None):
        super().__init__(name, user_cap)
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.alpha = float(alpha)
        self.rows = list(rows)
        self.lp = lp or LpSettings()
        self.states = {h: LinUCBState(dim + 1, reg) for h in heads}

    @staticmethod
    def _augment(Z):
        return np.column_stack([Z, np.ones(len(Z))])

    def fit(self, log):
        return self.update(log)

    def update(self, batch):
        self._check_source(batch)
        if len(batch):
            Z = self._augment(batch.features)
            for head, st in self.states.items():
                st.add(Z, getattr(batch, head))
        return self

    def select(self, rnd, rng):
        Z = self._augment(rnd.features())
        shape = (rnd.num_users, rnd.num_items)
        est = {"reward": self.states["reward"].ucb(Z, self.alpha).reshape(shape)}
        for head, st in self.states.items():
            if head != "reward":
                est[head] = st.mean(Z).reshape(shape)
        try:
            problem = assemble_problem(est["reward"], est, self.rows, self.user_cap, self.lp)
            sol = solve(problem, self.lp.solver_config())
        except InfeasibleSuspected as exc:
            logger.warning("%s: round %d skipped: %s", self.name, rnd.t, exc)
            return RoundDecision(np.zeros(shape, bool), None, est, error=f"InfeasibleSuspected: {exc}",
                                 solver_converged=False)
        chosen = realize(sol.x, self.user_cap, split_round_stream(rng)[1])
        return RoundDecision(chosen, sol.x, est, sol.iterations, sol.converged)
