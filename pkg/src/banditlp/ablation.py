"""Single-round sensitivity study of exploration under a budgeted allocation LP.

Ground truth (conversion probability, unsubscribe probability, lifetime
value) is drawn once per configuration seed.  Each run then draws a noisy
"model" of that truth at quality ``q`` (logit-space noise of scale
``sigma_q``), perturbs the predicted probabilities with moment-matched Beta
noise whose size grows with the temperature ``tau``, solves

    max  sum x * p_conv * ltv   s.t.  sum x * p_unsub <= budget,  sum_i x[u, i] <= 1,

on the perturbed tables and scores the allocation against the truth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .lp_solver import (
    AllocationProblem,
    GlobalRow,
    InfeasibleSuspected,
    SolverConfig,
    default_gamma,
    solve,
)
from .rng import TAG_ABLATION, stream


class DivisionByZero(ZeroDivisionError):
    """The no-exploration baseline has zero mean unsubscriptions."""


@dataclass(frozen=True)
class AblationConfig:
    users: int = 100
    items: int = 20
    conv_beta: tuple[float, float] = (2.0, 18.0)
    conv_scale: float = 1e-2
    unsub_beta: tuple[float, float] = (1.0, 9.0)
    unsub_scale: float = 1e-1
    ltv_shape: float = 2.0
    ltv_scale: float = 150.0
    sigma_grid: tuple[float, ...] = (0.1, 0.3, 0.6, 1.0)
    tau_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    u_scale: float = 1.0
    u_floor: float = 1e-4
    budget: float | None = None
    budget_fraction: float = 0.8
    runs: int = 30
    gamma_relative: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        for name in ("conv_beta", "unsub_beta", "sigma_grid", "tau_grid"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.users <= 0 or self.items <= 0 or self.runs <= 0:
            raise ValueError("users, items and runs must be positive")
        scales = (*self.conv_beta, *self.unsub_beta, self.conv_scale, self.unsub_scale,
                  self.ltv_shape, self.ltv_scale, self.u_scale, self.u_floor, self.gamma_relative)
        if min(scales) <= 0:
            raise ValueError("all distribution parameters and scales must be positive")
        if not self.sigma_grid or min(self.sigma_grid) < 0:
            raise ValueError("sigma grid must be non-empty and non-negative")
        if not self.tau_grid or min(self.tau_grid) < 0:
            raise ValueError("tau grid must be non-empty and non-negative")
        if self.budget is not None and not self.budget > 0:
            raise ValueError("budget must be positive")
        if not self.budget_fraction > 0:
            raise ValueError("budget_fraction must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Tables:
    conv: np.ndarray
    unsub: np.ndarray
    ltv: np.ndarray


def gen_ground_truth(config: AblationConfig, rng=None) -> Tables:
    """I.i.d. conversion, unsubscribe and lifetime-value tables of shape (users, items)."""
    rng = stream(TAG_ABLATION, config.seed, 0) if rng is None else rng
    shape = (config.users, config.items)
    conv = rng.beta(*config.conv_beta, shape) * config.conv_scale
    unsub = rng.beta(*config.unsub_beta, shape) * config.unsub_scale
    ltv = rng.gamma(config.ltv_shape, config.ltv_scale, shape)
    return Tables(conv, unsub, ltv)


def _clip_prob(p):
    return np.clip(p, 1e-12, 1 - 1e-12)


def noisy_predictions(truth: Tables, sigma: float, rng) -> Tables:
    """Add ``N(0, sigma^2)`` noise in logit space to both probabilities; LTV is exact."""
    def noisy(p):
        if sigma == 0:
            return p.copy()
        return expit(logit(_clip_prob(p)) + rng.normal(0.0, sigma, p.shape))

    return Tables(noisy(truth.conv), noisy(truth.unsub), truth.ltv)


def uncertainty(pred: np.ndarray, true: np.ndarray, tau: float, u_scale: float, u_floor: float) -> np.ndarray:
    """Perturbation scale ``tau * u_scale * |pred - true| + u_floor``, kept below the Bernoulli sd."""
    u = tau * u_scale * np.abs(pred - true) + u_floor
    # the Beta needs U^2 < p(1-p); keep a 1% margin so both shape parameters stay positive
    return np.minimum(u, np.sqrt(0.99 * pred * (1 - pred)))


def beta_parameters(pred, u) -> tuple[np.ndarray, np.ndarray]:
    """Shape parameters of the Beta with mean ``pred`` and variance ``u**2``."""
    pred = _clip_prob(np.asarray(pred, float))
    n = pred * (1 - pred) / np.asarray(u, float) ** 2 - 1.0
    return pred * n, (1 - pred) * n


def beta_perturb(pred: np.ndarray, u: np.ndarray, rng) -> np.ndarray:
    """Draws with mean ``pred`` and variance ``u**2`` from a moment-matched Beta."""
    return rng.beta(*beta_parameters(pred, u))


def perturb(pred: Tables, truth: Tables, tau: float, u_scale: float, u_floor: float, rng) -> Tables:
    conv = beta_perturb(pred.conv, uncertainty(pred.conv, truth.conv, tau, u_scale, u_floor), rng)
    unsub = beta_perturb(pred.unsub, uncertainty(pred.unsub, truth.unsub, tau, u_scale, u_floor), rng)
    return Tables(conv, unsub, pred.ltv)


def build_problem(tables: Tables, budget: float, gamma_relative: float = 1e-4) -> AllocationProblem:
    """Allocation LP in solver form: one unsubscribe row, at most one item per user."""
    value = tables.conv * tables.ltv
    rows = [] if math.isinf(budget) else [GlobalRow.from_dense(tables.unsub, budget, "unsub")]
    U, I = value.shape
    c = -value
    return AllocationProblem(c, rows, np.ones((U, I)), np.ones(U), default_gamma(c, gamma_relative))


def greedy_budget(config: AblationConfig, truth: Tables) -> float:
    """``budget_fraction`` times the unsubscribes of the unconstrained best-item allocation.

    The allocation is computed on the truth, i.e. the best-quality model with
    no exploration.
    """
    best = np.argmax(truth.conv * truth.ltv, axis=1)
    return config.budget_fraction * float(truth.unsub[np.arange(config.users), best].sum())


@dataclass
class RunRecord:
    q: float
    tau: float
    run: int
    reward: float
    unsub: float
    perturbed_unsub: float
    iterations: int
    converged: bool
    error: str | None = None


@dataclass
class AblationCell:
    q: float
    tau: float
    x: np.ndarray  # (runs, users, items)
    records: list[RunRecord] = field(default_factory=list)

    def _ok(self):
        return [r for r in self.records if r.error is None]

    @property
    def mean_reward(self) -> float:
        ok = self._ok()
        return float(np.mean([r.reward for r in ok])) if ok else math.nan

    @property
    def mean_unsub(self) -> float:
        ok = self._ok()
        return float(np.mean([r.unsub for r in ok])) if ok else math.nan

    @property
    def allocation_variance(self) -> float:
        """Mean over (u, i) of the across-run variance of ``x``."""
        return float(np.mean(np.var(self.x, axis=0))) if len(self.x) else 0.0


def run_cell(config: AblationConfig, q: float, tau: float, runs: Sequence[int] | None = None,
             truth: Tables | None = None, budget: float | None = None,
             solver: SolverConfig | None = None) -> AblationCell:
    """Solve and score one (quality, temperature) cell over the given run indices.

    The noisy model for a run depends on ``(q, run)`` only, so cells of the
    same quality share it across temperatures.
    """
    truth = gen_ground_truth(config) if truth is None else truth
    if budget is None:
        budget = config.budget if config.budget is not None else greedy_budget(config, truth)
    runs = range(config.runs) if runs is None else runs
    xs, records = [], []
    for run in runs:
        pred = noisy_predictions(truth, q, stream(TAG_ABLATION, config.seed, 1, _key(q), run))
        explored = perturb(pred, truth, tau, config.u_scale, config.u_floor,
                           stream(TAG_ABLATION, config.seed, 2, _key(q), _key(tau), run))
        try:
            sol = solve(build_problem(explored, budget, config.gamma_relative), solver)
        except InfeasibleSuspected as exc:
            xs.append(np.zeros_like(truth.conv))
            records.append(RunRecord(q, tau, run, math.nan, math.nan, math.nan, 0, False, str(exc)))
            continue
        x = sol.x
        xs.append(x)
        records.append(RunRecord(
            q, tau, run,
            reward=float(np.sum(x * truth.conv * truth.ltv)),
            unsub=float(np.sum(x * truth.unsub)),
            perturbed_unsub=float(np.sum(x * explored.unsub)),
            iterations=sol.iterations, converged=sol.converged))
    return AblationCell(q, tau, np.array(xs), records)


def _key(v: float) -> int:
    # stable integer key for a grid value
    return int(round(float(v) * 1_000_000))


@dataclass
class AblationResult:
    config: AblationConfig
    budget: float
    cells: dict[tuple[float, float], AblationCell]

    def records(self) -> list[RunRecord]:
        return [r for cell in self.cells.values() for r in cell.records]


def run_grid(config: AblationConfig, solver: SolverConfig | None = None) -> AblationResult:
    truth = gen_ground_truth(config)
    budget = config.budget if config.budget is not None else greedy_budget(config, truth)
    cells = {}
    for q in config.sigma_grid:
        for tau in config.tau_grid:
            cells[(q, tau)] = run_cell(config, q, tau, truth=truth, budget=budget, solver=solver)
    return AblationResult(config, budget, cells)


@dataclass(frozen=True)
class CellSummary:
    q: float
    tau: float
    mean_reward: float
    mean_unsub: float
    ruc: float
    av: float

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(cells) -> dict[tuple[float, float], CellSummary]:
    """Relative unsubscribe change (percent, against the same quality's tau=0 cell) and AV.

    Raises :class:`DivisionByZero` if a baseline cell has zero mean
    unsubscriptions, and ``KeyError`` if a quality has no tau=0 cell.
    """
    cells = cells.cells if isinstance(cells, AblationResult) else cells
    out = {}
    for (q, tau), cell in cells.items():
        base = cells[(q, 0.0)].mean_unsub
        if base == 0:
            raise DivisionByZero(f"baseline mean unsubscriptions are zero for q={q}")
        ruc = (cell.mean_unsub - base) / base * 100.0
        out[(q, tau)] = CellSummary(q, tau, cell.mean_reward, cell.mean_unsub, ruc, cell.allocation_variance)
    return out
