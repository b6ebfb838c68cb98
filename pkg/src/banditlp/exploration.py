"""Realized exploration: overlap-at-K and temperature tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import TAG_POLICY, stream


class ShapeMismatch(ValueError):
    pass


class NoFeasibleTau(RuntimeError):
    def __init__(self, message: str, result: "TuneResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class OverlapReport:
    k: int
    per_observation: np.ndarray
    mean: float
    n: int
    stderr: float = 0.0

    def to_dict(self) -> dict:
        return {"k": self.k, "mean": self.mean, "n": self.n, "stderr": self.stderr}


@dataclass(frozen=True)
class TuneResult:
    tau_grid: tuple[float, ...]
    overlap: tuple[float, ...]
    stderr: tuple[float, ...]
    p_safe: float
    k: int
    chosen_tau: float | None = None

    def to_dict(self) -> dict:
        return {
            "tau_grid": list(self.tau_grid),
            "overlap": list(self.overlap),
            "stderr": list(self.stderr),
            "p_safe": self.p_safe,
            "k": self.k,
            "chosen_tau": self.chosen_tau,
        }


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row; ties go to the lower index."""
    return np.argsort(-np.asarray(scores, float), axis=-1, kind="stable")[..., :k]


def overlap_at_k(ts_scores, exploit_scores, k: int) -> OverlapReport:
    """Mean share of the exploit top-``k`` that the exploring ranking also puts in its top-``k``."""
    ts = np.atleast_2d(np.asarray(ts_scores, float))
    ex = np.atleast_2d(np.asarray(exploit_scores, float))
    if ts.shape != ex.shape:
        raise ShapeMismatch(f"score tables differ: {ts.shape} vs {ex.shape}")
    n, actions = ts.shape
    if not 1 <= k <= actions:
        raise ValueError(f"k must lie in [1, {actions}]")
    a = np.zeros((n, actions), bool)
    b = np.zeros((n, actions), bool)
    rows = np.arange(n)[:, None]
    a[rows, top_k(ts, k)] = True
    b[rows, top_k(ex, k)] = True
    per = np.sum(a & b, axis=1) / k
    return OverlapReport(k, per, float(per.mean()), n)


def _scores(state, contexts, sample_rng=None, tau=None):
    ctx = np.asarray(contexts, float)
    if ctx.ndim != 3:
        raise ShapeMismatch("contexts must have shape (observations, actions, features)")
    flat = ctx.reshape(-1, ctx.shape[-1])
    if sample_rng is None:
        out = state.predict_mean(flat)
    else:
        # the sampled logit is rank-equivalent to the sampled probability
        out = state.predictive_sample(flat, sample_rng, tau).sample
    return out.reshape(ctx.shape[:2])


def tune_temperature(state, contexts, tau_grid: Sequence[float], k: int, p_safe: float,
                     draws_per_tau: int = 100, seed: int = 0) -> TuneResult:
    """Pick the largest temperature whose mean overlap-at-K stays at or above ``p_safe``.

    Raises :class:`NoFeasibleTau` (carrying the measured table) when no grid
    point qualifies.
    """
    grid = tuple(float(t) for t in tau_grid)
    if not grid:
        raise ValueError("tau grid is empty")
    if any(t < 0 for t in grid):
        raise ValueError("temperatures must be non-negative")
    if not 0.0 <= p_safe <= 1.0:
        raise ValueError("p_safe must lie in [0, 1]")
    exploit = _scores(state, contexts)
    means, errs = [], []
    for j, tau in enumerate(grid):
        vals = np.empty(draws_per_tau)
        for d in range(draws_per_tau):
            rng = stream(TAG_POLICY, seed, j, d)
            vals[d] = overlap_at_k(_scores(state, contexts, rng, tau), exploit, k).mean
        means.append(float(vals.mean()))
        errs.append(float(vals.std(ddof=1) / math.sqrt(draws_per_tau)) if draws_per_tau > 1 else 0.0)
    ok = [t for t, m in zip(grid, means) if m >= p_safe]
    result = TuneResult(grid, tuple(means), tuple(errs), p_safe, k, max(ok) if ok else None)
    if not ok:
        raise NoFeasibleTau(f"no temperature reaches overlap {p_safe}", result)
    return result


def monitor_drift(previous, refreshed, contexts, k: int) -> OverlapReport:
    """Overlap between two models' exploit rankings on the same contexts."""
    return overlap_at_k(_scores(refreshed, contexts), _scores(previous, contexts), k)
