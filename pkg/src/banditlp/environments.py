"""Simulation environments with hidden reward and cost oracles.

Two sources are provided:

* :class:`SyntheticEnvironment` draws fresh user features every round against
  fixed item features, with rewards and two cost types centred on smooth
  functions of linear scores.
* :class:`ReplayEnvironment` replays a logged click dataset whose missing
  user-item cells are filled by K-nearest-neighbour imputation; costs are
  synthetic, generated the same way as in the synthetic environment.

Both expose the same round interface to the experiment harness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .rng import TAG_ENV, TAG_IMPUTE, TAG_LOG, TAG_ROUND, TAG_TARGETS, as_generator, stream


class EmptyRegion(RuntimeError):
    """The biased logging policy has no eligible user-item pair."""


class NoInteractions(ValueError):
    """An item has no logged rows, so its column cannot be imputed."""


def mu_reward(v, shape=(-4.0, 5.0, 5.0, 5.0, 5.0, 0.1, 2.0)):
    """``sigmoid(a v + b) + c sigmoid(d v + e) + f sin(g v)``."""
    a, b, c, d, e, f, g = shape
    v = np.asarray(v, float)
    return expit(a * v + b) + c * expit(d * v + e) + f * np.sin(g * v)


def mu_cost(v, shape=(1.0, 0.1, 0.5)):
    """``base + amp * tanh(slope * v)``."""
    base, amp, slope = shape
    return base + amp * np.tanh(slope * np.asarray(v, float))


@dataclass(frozen=True)
class ConstraintTargets:
    global_budget: float
    provider_budgets: np.ndarray
    global_multiplier: float
    provider_multiplier: float
    simulated_users: int
    scale: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["provider_budgets"] = self.provider_budgets.tolist()
        return d


@dataclass
class LoggedBatch:
    """Feedback tuples: pair features, chosen (user, item), reward and both costs."""

    features: np.ndarray
    users: np.ndarray
    items: np.ndarray
    reward: np.ndarray
    cost1: np.ndarray
    cost2: np.ndarray
    source: str = ""

    def __len__(self) -> int:
        return len(self.reward)

    @classmethod
    def empty(cls, dim: int, source: str = "") -> "LoggedBatch":
        z = np.zeros(0)
        return cls(np.zeros((0, dim)), z.astype(int), z.astype(int), z, z, z, source)

    def concat(self, other: "LoggedBatch") -> "LoggedBatch":
        return LoggedBatch(np.vstack([self.features, other.features]),
                           np.concatenate([self.users, other.users]),
                           np.concatenate([self.items, other.items]),
                           np.concatenate([self.reward, other.reward]),
                           np.concatenate([self.cost1, other.cost1]),
                           np.concatenate([self.cost2, other.cost2]),
                           self.source)


@dataclass
class EnvironmentRound:
    """One round: contexts and the hidden (mean and realized) oracles."""

    t: int
    user_features: np.ndarray
    item_features: np.ndarray
    providers: np.ndarray
    mean_reward: np.ndarray
    mean_cost1: np.ndarray
    mean_cost2: np.ndarray
    reward: np.ndarray
    cost1: np.ndarray
    cost2: np.ndarray
    user_ids: np.ndarray | None = None
    _features: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_users(self) -> int:
        return self.user_features.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_features.shape[0]

    def features(self) -> np.ndarray:
        """Joint features ``[z_u, z_i]`` for every pair, user-major, shape (U*I, d_u+d_i)."""
        if self._features is None:
            self._features = pair_features(self.user_features, self.item_features)
        return self._features

    def feedback(self, chosen: np.ndarray, source: str = "") -> LoggedBatch:
        """Realized outcomes for a boolean (U, I) selection mask."""
        u, i = np.nonzero(chosen)
        flat = u * self.num_items + i
        return LoggedBatch(self.features()[flat], u, i, self.reward[u, i],
                           self.cost1[u, i], self.cost2[u, i], source)


def pair_features(zu: np.ndarray, zi: np.ndarray) -> np.ndarray:
    U, I = zu.shape[0], zi.shape[0]
    return np.concatenate([np.repeat(zu, I, axis=0), np.tile(zi, (U, 1))], axis=1)


def provider_partition(num_items: int, num_providers: int) -> np.ndarray:
    if num_providers <= 0 or num_items % num_providers:
        raise ValueError("items must split evenly across providers")
    return np.arange(num_items) // (num_items // num_providers)


def _random_selection(rng, num_users, num_items, cap, eligible=None):
    """Uniformly random set of up to ``cap`` items per user, among ``eligible`` ones."""
    if eligible is None:
        eligible = np.ones((num_users, num_items), bool)
    keys = np.where(eligible, rng.random((num_users, num_items)), np.inf)
    order = np.argsort(keys, axis=1, kind="stable")[:, :cap]
    chosen = np.zeros((num_users, num_items), bool)
    rows = np.arange(num_users)[:, None]
    chosen[rows, order] = True
    return chosen & eligible


class _CostModel:
    """Linear-score cost oracles shared by both environments."""

    def _init_costs(self, rng, user_dim, item_dim, scale):
        self.beta_u1 = rng.normal(0.0, scale, user_dim)
        self.beta_i1 = rng.normal(0.0, scale, item_dim)
        self.beta_u2 = rng.normal(0.0, scale, user_dim)
        self.beta_i2 = rng.normal(0.0, scale, item_dim)

    def cost_means(self, zu, zi):
        shape = self.config.cost_shape
        v1 = (zu @ self.beta_u1)[:, None] + (zi @ self.beta_i1)[None, :]
        v2 = (zu @ self.beta_u2)[:, None] + (zi @ self.beta_i2)[None, :]
        return mu_cost(v1, shape), mu_cost(v2, shape)

    def draw_costs(self, zu, rng):
        m1, m2 = self.cost_means(zu, self.item_features)
        sd = math.sqrt(self.config.cost_noise)
        return m1 + sd * rng.standard_normal(m1.shape), m2 + sd * rng.standard_normal(m2.shape)

    def _targets_from(self, zu, rng, scale):
        cfg = self.config
        c1, c2 = self.draw_costs(zu, rng)
        chosen = _random_selection(rng, zu.shape[0], self.num_items, cfg.user_cap)
        total1 = float(np.sum(c1[chosen]))
        per = np.bincount(self.providers[np.nonzero(chosen)[1]], weights=c2[chosen],
                          minlength=self.num_providers)
        return ConstraintTargets(cfg.global_multiplier * total1 * scale,
                                 cfg.provider_multiplier * per * scale,
                                 cfg.global_multiplier, cfg.provider_multiplier,
                                 zu.shape[0], scale)


@dataclass(frozen=True)
class SyntheticConfig:
    users: int = 500
    items: int = 100
    providers: int = 5
    user_dim: int = 10
    item_dim: int = 10
    reward_noise: float = 0.1
    cost_noise: float = 0.1
    weight_scale: float = 0.6
    reward_shape: tuple[float, ...] = (-4.0, 5.0, 5.0, 5.0, 5.0, 0.1, 2.0)
    cost_shape: tuple[float, ...] = (1.0, 0.1, 0.5)
    global_multiplier: float = 0.8
    provider_multiplier: float = 1.5
    user_cap: int = 2
    target_users: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reward_shape", tuple(float(v) for v in self.reward_shape))
        object.__setattr__(self, "cost_shape", tuple(float(v) for v in self.cost_shape))
        for name in ("users", "items", "providers", "user_dim", "item_dim", "user_cap", "target_users"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.items % self.providers:
            raise ValueError("items must be divisible by providers")
        if len(self.reward_shape) != 7 or len(self.cost_shape) != 3:
            raise ValueError("reward_shape needs 7 constants and cost_shape 3")
        if self.reward_noise < 0 or self.cost_noise < 0 or self.weight_scale <= 0:
            raise ValueError("noise must be non-negative and weight_scale positive")


class SyntheticEnvironment(_CostModel):
    reward_head = "gaussian"

    def __init__(self, config: SyntheticConfig | None = None):
        self.config = cfg = config or SyntheticConfig()
        rng = stream(TAG_ENV, cfg.seed)
        s = cfg.weight_scale
        self.beta_u = rng.normal(0.0, s, cfg.user_dim)
        self.beta_i = rng.normal(0.0, s, cfg.item_dim)
        self._init_costs(rng, cfg.user_dim, cfg.item_dim, s)
        self.item_features = rng.normal(0.0, 1.0, (cfg.items, cfg.item_dim))
        self.providers = provider_partition(cfg.items, cfg.providers)

    num_users = property(lambda self: self.config.users)
    num_items = property(lambda self: self.config.items)
    num_providers = property(lambda self: self.config.providers)
    user_cap = property(lambda self: self.config.user_cap)
    feature_dim = property(lambda self: self.config.user_dim + self.config.item_dim)

    def reward_score(self, zu, zi=None):
        zi = self.item_features if zi is None else zi
        return (zu @ self.beta_u)[:, None] + (zi @ self.beta_i)[None, :]

    def gen_round(self, t: int, rng=None) -> EnvironmentRound:
        cfg = self.config
        rng = stream(TAG_ROUND, cfg.seed, t) if rng is None else as_generator(rng)
        zu = rng.normal(0.0, 1.0, (cfg.users, cfg.user_dim))
        mr = mu_reward(self.reward_score(zu), cfg.reward_shape)
        m1, m2 = self.cost_means(zu, self.item_features)
        sr, sc = math.sqrt(cfg.reward_noise), math.sqrt(cfg.cost_noise)
        r = mr + sr * rng.standard_normal(mr.shape)
        c1 = m1 + sc * rng.standard_normal(m1.shape)
        c2 = m2 + sc * rng.standard_normal(m2.shape)
        return EnvironmentRound(t, zu, self.item_features, self.providers, mr, m1, m2, r, c1, c2)

    def biased_logging_data(self, rounds: int = 1, rng=None) -> LoggedBatch:
        """Uniform picks, up to the user cap, among pairs with a negative reward score."""
        rng = stream(TAG_LOG, self.config.seed) if rng is None else as_generator(rng)
        out = LoggedBatch.empty(self.feature_dim, "logging")
        for t in range(rounds):
            rnd = self.gen_round(-1 - t, rng)
            eligible = self.reward_score(rnd.user_features) < 0
            if not eligible.any():
                continue
            chosen = _random_selection(rng, rnd.num_users, rnd.num_items, self.user_cap, eligible)
            out = out.concat(rnd.feedback(chosen, "logging"))
        if len(out) == 0:
            raise EmptyRegion("no user-item pair has a negative reward score")
        return out

    def compute_constraint_targets(self, rng=None) -> ConstraintTargets:
        """Budgets from a uniform random policy on ``target_users`` users, rescaled to a round."""
        cfg = self.config
        rng = stream(TAG_TARGETS, cfg.seed) if rng is None else as_generator(rng)
        zu = rng.normal(0.0, 1.0, (cfg.target_users, cfg.user_dim))
        return self._targets_from(zu, rng, cfg.users / cfg.target_users)

    def snapshot(self) -> dict:
        return {
            "config": asdict(self.config),
            "beta_u": self.beta_u.tolist(), "beta_i": self.beta_i.tolist(),
            "beta_u1": self.beta_u1.tolist(), "beta_i1": self.beta_i1.tolist(),
            "beta_u2": self.beta_u2.tolist(), "beta_i2": self.beta_i2.tolist(),
            "item_features": self.item_features.tolist(),
            "providers": self.providers.tolist(),
        }


# ---------------------------------------------------------------- replay


def _dense_ids(labels: np.ndarray):
    # integer-looking ids sort numerically, anything else lexically
    try:
        keys = labels.astype(np.int64)
    except ValueError:
        keys = labels
    uniq, inverse = np.unique(keys, return_inverse=True)
    return uniq.astype(str), inverse


@dataclass
class LoggedDataset:
    """Logged (user, item, features, reward) rows with dense ids."""

    users: np.ndarray
    items: np.ndarray
    rewards: np.ndarray
    user_features: np.ndarray
    num_items: int
    user_labels: np.ndarray | None = None

    def __post_init__(self):
        if not (len(self.users) == len(self.items) == len(self.rewards)):
            raise ValueError("row arrays differ in length")
        if np.any((self.rewards != 0) & (self.rewards != 1)):
            raise ValueError("rewards must be 0 or 1")
        if len(self.users) and (self.users.max() >= len(self.user_features) or self.items.max() >= self.num_items):
            raise ValueError("ids out of range")

    @property
    def num_users(self) -> int:
        return len(self.user_features)

    def item_ctr(self) -> np.ndarray:
        counts = np.bincount(self.items, minlength=self.num_items)
        clicks = np.bincount(self.items, weights=self.rewards, minlength=self.num_items)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(counts > 0, clicks / np.maximum(counts, 1), np.nan)

    @classmethod
    def from_csv(cls, path, max_users: int | None = 10_000, rng=None) -> "LoggedDataset":
        """Read ``user_id,item_id,f0..f{d-1},reward`` rows.

        Ids are remapped to dense ranges (items in sorted order).  When there
        are more than ``max_users`` users a uniform subsample is kept.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            fcols = [k for k, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
            if header[0] != "user_id" or header[1] != "item_id" or header[-1] != "reward" or not fcols:
                raise ValueError("expected header user_id,item_id,f0..f{d-1},reward")
            raw = [row for row in reader if row]
        uid = np.array([r[0] for r in raw])
        iid = np.array([r[1] for r in raw])
        feats = np.array([[float(r[k]) for k in fcols] for r in raw]).reshape(len(raw), len(fcols))
        rewards = np.array([float(r[-1]) for r in raw])
        ulabels, uidx = _dense_ids(uid)
        ilabels, iidx = _dense_ids(iid)
        if max_users is not None and len(ulabels) > max_users:
            keep = np.sort(as_generator(rng).choice(len(ulabels), max_users, replace=False))
            remap = -np.ones(len(ulabels), int)
            remap[keep] = np.arange(max_users)
            mask = remap[uidx] >= 0
            uidx, iidx, feats, rewards = remap[uidx[mask]], iidx[mask], feats[mask], rewards[mask]
            ulabels = ulabels[keep]
        ufeat = np.zeros((len(ulabels), feats.shape[1]))
        # first row of each user supplies its features
        first = np.unique(uidx, return_index=True)[1]
        ufeat[uidx[first]] = feats[first]
        return cls(uidx, iidx, rewards, ufeat, len(ilabels), ulabels)

    def to_csv(self, path) -> None:
        d = self.user_features.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["user_id", "item_id", *[f"f{k}" for k in range(d)], "reward"])
            for u, i, r in zip(self.users, self.items, self.rewards):
                w.writerow([int(u), int(i), *[repr(float(v)) for v in self.user_features[u]], int(r)])


def make_logged_dataset(num_users: int = 2000, num_items: int = 10, dim: int = 5,
                        rows_per_user: int = 3, seed: int = 0) -> LoggedDataset:
    """Random-policy click log with a logistic ground truth, in the replay schema.

    Items differ in base click rate, so a top-CTR restriction is informative,
    and user features interact with item-specific weights.
    """
    rng = stream(TAG_ENV, seed, 99)
    X = rng.normal(0.0, 1.0, (num_users, dim))
    W = rng.normal(0.0, 1.0, (num_items, dim))
    base = np.linspace(-3.0, -0.5, num_items)[rng.permutation(num_items)]
    users = np.repeat(np.arange(num_users), rows_per_user)
    items = rng.integers(0, num_items, len(users))
    p = expit(base[items] + np.sum(X[users] * W[items], axis=1))
    rewards = (rng.random(len(users)) < p).astype(float)
    return LoggedDataset(users, items, rewards, X, num_items)


def nearest_observers(features: np.ndarray, observers: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """For each query user, the ``k`` observers nearest in Euclidean distance (observer ids)."""
    tree = cKDTree(features[observers])
    _, idx = tree.query(features[queries], k=k)
    return observers[np.asarray(idx).reshape(len(queries), k)]


@dataclass
class ImputedOracle:
    rewards: np.ndarray
    probabilities: np.ndarray
    observed: np.ndarray
    fallback_items: tuple[int, ...] = ()


def impute_reward_matrix(dataset: LoggedDataset, k: int = 10, rng=None) -> ImputedOracle:
    """Dense Bernoulli reward matrix from KNN averages over users who saw each item.

    Observed cells keep their logged reward (the last logged row wins when a
    pair was logged more than once).  Items seen by fewer than ``k`` users fall
    back to the item's overall click rate and are listed in ``fallback_items``.
    """
    rng = stream(TAG_IMPUTE, 0) if rng is None else as_generator(rng)
    U, I = dataset.num_users, dataset.num_items
    rewards = np.zeros((U, I))
    observed = np.zeros((U, I), bool)
    rewards[dataset.users, dataset.items] = dataset.rewards
    observed[dataset.users, dataset.items] = True
    # per-observer mean reward for each item
    probs = np.zeros((U, I))
    fallback = []
    for i in range(I):
        seen = np.flatnonzero(observed[:, i])
        if seen.size == 0:
            raise NoInteractions(f"item {i} has no logged rows")
        missing = np.flatnonzero(~observed[:, i])
        probs[seen, i] = rewards[seen, i]
        if missing.size == 0:
            continue
        if seen.size < k:
            fallback.append(i)
            probs[missing, i] = rewards[seen, i].mean()
            continue
        nbrs = nearest_observers(dataset.user_features, seen, missing, k)
        probs[missing, i] = rewards[nbrs, i].mean(axis=1)
    draws = (rng.random((U, I)) < probs).astype(float)
    return ImputedOracle(np.where(observed, rewards, draws), probs, observed, tuple(fallback))


@dataclass(frozen=True)
class ReplayConfig:
    users_per_round: int = 200
    providers: int = 5
    knn: int = 10
    top_fraction: float = 0.3
    item_dim: int = 10
    cost_noise: float = 0.1
    weight_scale: float = 0.6
    cost_shape: tuple[float, ...] = (1.0, 0.1, 0.5)
    global_multiplier: float = 0.8
    provider_multiplier: float = 1.5
    user_cap: int = 2
    target_users: int = 5000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cost_shape", tuple(float(v) for v in self.cost_shape))
        if self.users_per_round <= 0 or self.knn <= 0 or self.user_cap <= 0:
            raise ValueError("sizes must be positive")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")


class ReplayEnvironment(_CostModel):
    """Rounds sample users from an imputed logged dataset; rewards are binary."""

    reward_head = "binary"

    def __init__(self, dataset: LoggedDataset, config: ReplayConfig | None = None):
        self.config = cfg = config or ReplayConfig()
        self.dataset = dataset
        if dataset.num_items % cfg.providers:
            raise ValueError("items must be divisible by providers")
        self.oracle = impute_reward_matrix(dataset, cfg.knn, stream(TAG_IMPUTE, cfg.seed))
        rng = stream(TAG_ENV, cfg.seed)
        self._init_costs(rng, dataset.user_features.shape[1], cfg.item_dim, cfg.weight_scale)
        self.item_features = rng.normal(0.0, 1.0, (dataset.num_items, cfg.item_dim))
        self.providers = provider_partition(dataset.num_items, cfg.providers)

    num_items = property(lambda self: self.dataset.num_items)
    num_providers = property(lambda self: self.config.providers)
    user_cap = property(lambda self: self.config.user_cap)
    feature_dim = property(lambda self: self.dataset.user_features.shape[1] + self.config.item_dim)

    @property
    def num_users(self) -> int:
        return min(self.config.users_per_round, self.dataset.num_users)

    def gen_round(self, t: int, rng=None) -> EnvironmentRound:
        rng = stream(TAG_ROUND, self.config.seed, t) if rng is None else as_generator(rng)
        ids = np.sort(rng.choice(self.dataset.num_users, self.num_users, replace=False))
        zu = self.dataset.user_features[ids]
        m1, m2 = self.cost_means(zu, self.item_features)
        sc = math.sqrt(self.config.cost_noise)
        c1 = m1 + sc * rng.standard_normal(m1.shape)
        c2 = m2 + sc * rng.standard_normal(m2.shape)
        r = self.oracle.rewards[ids]
        return EnvironmentRound(t, zu, self.item_features, self.providers,
                                self.oracle.probabilities[ids], m1, m2, r, c1, c2, user_ids=ids)

    def eligible_items(self) -> np.ndarray:
        """Items in the top ``top_fraction`` by logged click rate."""
        ctr = np.nan_to_num(self.dataset.item_ctr(), nan=-np.inf)
        return top_fraction_items(ctr, self.config.top_fraction)

    def biased_logging_data(self, rounds: int = 1, rng=None) -> LoggedBatch:
        rng = stream(TAG_LOG, self.config.seed) if rng is None else as_generator(rng)
        allowed = np.zeros(self.num_items, bool)
        allowed[self.eligible_items()] = True
        out = LoggedBatch.empty(self.feature_dim, "logging")
        for t in range(rounds):
            rnd = self.gen_round(-1 - t, rng)
            eligible = np.broadcast_to(allowed, (rnd.num_users, self.num_items))
            chosen = _random_selection(rng, rnd.num_users, self.num_items, self.user_cap, eligible)
            out = out.concat(rnd.feedback(chosen, "logging"))
        if len(out) == 0:
            raise EmptyRegion("no eligible items")
        return out

    def compute_constraint_targets(self, rng=None) -> ConstraintTargets:
        cfg = self.config
        rng = stream(TAG_TARGETS, cfg.seed) if rng is None else as_generator(rng)
        ids = rng.integers(0, self.dataset.num_users, cfg.target_users)
        return self._targets_from(self.dataset.user_features[ids], rng, self.num_users / cfg.target_users)


def top_fraction_items(ctr, fraction: float = 0.3) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` items with the highest click rate."""
    ctr = np.asarray(ctr, float)
    n = math.ceil(fraction * len(ctr))
    return np.sort(np.argsort(-ctr, kind="stable")[:n])
