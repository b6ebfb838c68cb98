"""Isotonic calibration of predicted probabilities.

The calibration map is fitted on exploit-mode (posterior mean) scores and then
applied unchanged to Thompson-sampled scores, so the spread of the sampled
probabilities survives calibration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class IsotonicModel:
    """Nondecreasing step function ``score -> probability``.

    ``values[k]`` holds on ``[breakpoints[k], breakpoints[k + 1])``; scores
    outside the fitted range clamp to the first or last value.
    """

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, float)
        val = np.asarray(self.values, float)
        if bp.ndim != 1 or bp.shape != val.shape or bp.size == 0:
            raise ValueError("breakpoints and values must be equal-length non-empty vectors")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly ascending")
        if np.any(np.diff(val) < 0) or np.any(val < 0) or np.any(val > 1):
            raise ValueError("values must be nondecreasing and inside [0, 1]")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", val)

    def __call__(self, scores):
        return apply(self, scores)

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "IsotonicModel":
        return cls(np.array(data["breakpoints"], float), np.array(data["values"], float))

    @classmethod
    def identity(cls, grid: int = 1001) -> "IsotonicModel":
        g = np.linspace(0.0, 1.0, grid)
        return cls(g, g)


def fit_isotonic(scores, labels) -> IsotonicModel:
    """Least-squares monotone step fit by pool-adjacent-violators.

    Equal scores are pooled into one weighted point first, so the result does
    not depend on input order.
    """
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels, float).ravel()
    if scores.size == 0:
        raise EmptyInput("need at least one (score, label) pair")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    keys, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    means = np.bincount(inverse, weights=labels) / counts
    fitted = isotonic_regression(means, weights=counts.astype(float), increasing=True).x
    return IsotonicModel(keys, np.clip(fitted, 0.0, 1.0))


def apply(model: IsotonicModel, scores) -> np.ndarray:
    scores = np.asarray(scores, float)
    idx = np.searchsorted(model.breakpoints, scores, side="right") - 1
    return model.values[np.clip(idx, 0, model.values.size - 1)]


def calibrate_ts_batch(model: IsotonicModel, ts_scores) -> np.ndarray:
    """Map Thompson-sampled probabilities through a map fitted on exploit scores."""
    return apply(model, ts_scores)
