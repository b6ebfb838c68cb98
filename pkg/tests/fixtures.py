"""Shared small models used across test modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from banditlp.bayes_models import MlpSpec, TrainSchedule, fit_laplace, train_map

PRIOR_VARIANCE = 4.0


@lru_cache(maxsize=None)
def logistic_1d():
    """Single-weight logistic model ``p = sigmoid(w z)`` fitted to 20 points."""
    rng = np.random.default_rng(3)
    z = rng.normal(0.0, 1.0, 20)
    y = (rng.random(20) < 1.0 / (1.0 + np.exp(-1.5 * z))).astype(float)
    spec = MlpSpec(1, (), head="binary", prior_variance=PRIOR_VARIANCE, use_bias=False)
    model = train_map(spec, z[:, None], y, TrainSchedule(epochs=400, batch_size=20, learning_rate=0.05))
    return z, y, fit_laplace(model, z[:, None])


@lru_cache(maxsize=None)
def small_ranker(seed: int = 0):
    """A two-feature logistic model scoring 8 actions for 30 observations."""
    rng = np.random.default_rng(seed)
    Z = rng.normal(0.0, 1.0, (200, 2))
    y = (rng.random(200) < 1.0 / (1.0 + np.exp(-(Z @ [1.0, -0.5])))).astype(float)
    spec = MlpSpec(2, (8,), head="binary", prior_variance=1.0)
    model = train_map(spec, Z, y, TrainSchedule(epochs=60, batch_size=32, learning_rate=0.02), seed=seed)
    contexts = rng.normal(0.0, 1.0, (30, 8, 2))
    return fit_laplace(model, Z), contexts


@lru_cache(maxsize=None)
def tuning_contexts():
    """50 observations of 8 one-dimensional actions for the logistic fixture."""
    return np.random.default_rng(11).normal(0.0, 1.0, (50, 8, 1))


def moving_average_nonincreasing(values, window: int = 3) -> bool:
    smooth = np.convolve(np.asarray(values, float), np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(smooth) <= 0))
