"""Small feed-forward predictors with a last-layer Laplace posterior.

A network ``f(z)`` is trained to its MAP weights under a Gaussian prior of
variance ``prior_variance``.  The posterior over the output layer is then
approximated by a Gaussian with precision

    Omega = sum_n g(z_n) h''(f_n) g(z_n)^T + I / prior_variance

where ``g(z)`` are the penultimate activations (plus a constant 1 for the
bias) and ``h''`` is the Gauss-Newton curvature of the likelihood.  Thompson
draws use ``mu ~ N(f(z), tau * V)`` with ``V = prior_variance + g^T Omega^-1 g``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit

from .rng import TAG_INIT, as_generator, stream

HEADS = ("binary", "gaussian")
ACTIVATIONS = ("tanh", "sigmoid")


class DivergenceDetected(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture and prior of a predictor.

    ``hidden_layer_sizes=()`` gives a generalized linear model; with
    ``use_bias=False`` as well it is a single weight vector.
    """

    input_dim: int
    hidden_layer_sizes: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    head: str = "binary"
    prior_variance: float = 1.0
    noise_variance: float = 0.1
    use_bias: bool = True
    laplace_layers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden_layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")
        if self.head == "gaussian" and not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive for a gaussian head")
        if self.laplace_layers != 1:
            # deeper Laplace suffixes are not supported
            raise ValueError("only last-layer Laplace (laplace_layers=1) is supported")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layer_sizes, 1)

    @property
    def feature_dim(self) -> int:
        """Length of g(z)."""
        width = self.hidden_layer_sizes[-1] if self.hidden_layer_sizes else self.input_dim
        return width + int(self.use_bias)


@dataclass(frozen=True)
class TrainSchedule:
    """Mini-batch Adam schedule.

    ``steps`` (when set) overrides ``epochs`` with a fixed number of
    mini-batch updates, which keeps warm-start refreshes at constant cost.
    """

    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-2
    steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999


def _act(name, a):
    return np.tanh(a) if name == "tanh" else expit(a)


def _act_grad(name, h):
    # derivative expressed through the activation output
    return 1.0 - h * h if name == "tanh" else h * (1.0 - h)


class Mlp:
    """Feed-forward network with a scalar output ``f(z)``."""

    def __init__(self, spec: MlpSpec, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.spec = spec
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, spec: MlpSpec, seed: int | np.random.Generator = 0) -> "Mlp":
        rng = as_generator(seed) if isinstance(seed, np.random.Generator) else stream(TAG_INIT, int(seed))
        sizes = spec.layer_sizes
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(spec, weights, biases)

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # flat parameter view (biases of the output layer are skipped when use_bias=False)
    def _param_list(self, weights=None, biases=None):
        weights = self.weights if weights is None else weights
        biases = self.biases if biases is None else biases
        out = []
        for k, (w, b) in enumerate(zip(weights, biases)):
            out.append(w)
            if k < len(weights) - 1 or self.spec.use_bias:
                out.append(b)
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self._param_list()])

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for p in self._param_list():
            p[...] = theta[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def _forward(self, Z):
        hs = [np.asarray(Z, float)]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            hs.append(_act(self.spec.activation, hs[-1] @ w + b))
        f = hs[-1] @ self.weights[-1][:, 0]
        if self.spec.use_bias:
            f = f + self.biases[-1][0]
        return f, hs

    def predict(self, Z) -> np.ndarray:
        """Raw output ``f(z)`` (a logit for the binary head)."""
        return self._forward(Z)[0]

    def features(self, Z) -> np.ndarray:
        """Last-layer features ``g(z)``: penultimate activations plus a bias column."""
        _, hs = self._forward(Z)
        h = hs[-1]
        if self.spec.use_bias:
            h = np.column_stack([h, np.ones(len(h))])
        return h

    def _nll_terms(self, f, y):
        if self.spec.head == "binary":
            return -(y * log_expit(f) + (1.0 - y) * log_expit(-f)), expit(f) - y
        r = f - y
        return 0.5 * r * r / self.spec.noise_variance, r / self.spec.noise_variance

    def loss_and_grad(self, Z, y, n_total: int | None = None):
        """Mean negative log-likelihood over the batch plus the prior term.

        The prior ``|theta|^2 / (2 prior_variance)`` is divided by
        ``n_total`` (the full data size), so a full-batch call returns the
        MAP objective divided by N.
        """
        Z = np.asarray(Z, float)
        y = np.asarray(y, float)
        n = len(y)
        n_total = n if n_total is None else n_total
        f, hs = self._forward(Z)
        nll, df = self._nll_terms(f, y)
        loss = float(np.mean(nll))
        delta = (df / n)[:, None]
        gw, gb = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            gw[k] = hs[k].T @ delta
            gb[k] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.weights[k].T) * _act_grad(self.spec.activation, hs[k])
        theta = self.get_flat()
        grad = np.concatenate([g.ravel() for g in self._param_list(gw, gb)])
        grad += theta / (self.spec.prior_variance * n_total)
        loss += float(theta @ theta) / (2.0 * self.spec.prior_variance * n_total)
        return loss, grad


def _check_data(spec, Z, y):
    Z = np.asarray(Z, float)
    y = np.asarray(y, float)
    if Z.ndim != 2 or Z.shape[1] != spec.input_dim:
        raise ValueError(f"features must have shape (n, {spec.input_dim})")
    if len(y) != len(Z):
        raise ValueError("features and labels differ in length")
    if spec.head == "binary" and not np.all((y == 0) | (y == 1)):
        raise ValueError("binary head needs labels in {0, 1}")
    return Z, y


def train_map(spec: MlpSpec, Z, y, schedule: TrainSchedule | None = None,
              seed: int = 0, init: Mlp | None = None, return_history: bool = False):
    """Fit MAP weights by mini-batch Adam.

    ``init`` warm-starts from an existing network (its weights are copied).
    With ``return_history`` the per-epoch full-data loss is also returned.
    """
    schedule = schedule or TrainSchedule()
    Z, y = _check_data(spec, Z, y)
    n = len(y)
    if n == 0:
        raise ValueError("need at least one training example")
    model = init.copy() if init is not None else Mlp.init(spec, seed)
    rng = stream(TAG_INIT, int(seed), 1)
    theta = model.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    batch = min(schedule.batch_size, n)
    per_epoch = max(1, math.ceil(n / batch))
    total = schedule.steps if schedule.steps is not None else schedule.epochs * per_epoch
    history = []
    order = rng.permutation(n)
    pos = 0
    for step in range(1, total + 1):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grad = model.loss_and_grad(Z[idx], y[idx], n_total=n)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceDetected(f"non-finite loss at step {step}")
        m = schedule.beta1 * m + (1 - schedule.beta1) * grad
        v = schedule.beta2 * v + (1 - schedule.beta2) * grad * grad
        mhat = m / (1 - schedule.beta1 ** step)
        vhat = v / (1 - schedule.beta2 ** step)
        theta = theta - schedule.learning_rate * mhat / (np.sqrt(vhat) + 1e-8)
        model.set_flat(theta)
        if return_history and step % per_epoch == 0:
            full, _ = model.loss_and_grad(Z, y)
            if not math.isfinite(full):
                raise DivergenceDetected(f"non-finite loss after step {step}")
            history.append(full)
    return (model, history) if return_history else model


@dataclass(frozen=True)
class PosteriorDraw:
    mean: np.ndarray
    variance: np.ndarray
    sample: np.ndarray
    output: np.ndarray


@dataclass
class LaplaceState:
    """Gaussian last-layer posterior around a trained network."""

    model: Mlp
    omega: np.ndarray
    temperature: float = 1.0
    omega_cholesky: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        self.omega = 0.5 * (self.omega + self.omega.T)
        self.omega_cholesky = np.linalg.cholesky(self.omega)

    @property
    def spec(self) -> MlpSpec:
        return self.model.spec

    def with_temperature(self, tau: float) -> "LaplaceState":
        return LaplaceState(self.model, self.omega.copy(), float(tau))

    def variance(self, Z) -> np.ndarray:
        """Predictive variance ``V(z) = prior_variance + g^T Omega^-1 g``."""
        G = self.model.features(Z)
        half = solve_triangular(self.omega_cholesky, G.T, lower=True)
        return self.spec.prior_variance + np.sum(half * half, axis=0)

    def _link(self, f):
        return expit(f) if self.spec.head == "binary" else f

    def predict_mean(self, Z) -> np.ndarray:
        return self._link(self.model.predict(Z))

    def predictive_sample(self, Z, rng, tau: float | None = None) -> PosteriorDraw:
        tau = self.temperature if tau is None else float(tau)
        rng = as_generator(rng)
        mean = self.model.predict(Z)
        var = self.variance(Z)
        eps = rng.standard_normal(len(mean))
        sample = mean + math.sqrt(tau) * np.sqrt(var) * eps if tau > 0 else mean.copy()
        return PosteriorDraw(mean, var, sample, self._link(sample))

    def save(self, path) -> None:
        """Write a checkpoint (npz); loads back bit-exactly."""
        arrays = {f"w{k}": w for k, w in enumerate(self.model.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.model.biases)})
        header = {"spec": asdict(self.spec), "temperature": self.temperature,
                  "layers": len(self.model.weights)}
        np.savez(path, header=np.array(json.dumps(header)), omega=self.omega, **arrays)

    @classmethod
    def load(cls, path) -> "LaplaceState":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            spec = MlpSpec(**header["spec"])
            n = header["layers"]
            model = Mlp(spec, [data[f"w{k}"].copy() for k in range(n)],
                        [data[f"b{k}"].copy() for k in range(n)])
            state = cls.__new__(cls)
            state.model = model
            state.omega = data["omega"].copy()
            state.temperature = float(header["temperature"])
            state.omega_cholesky = np.linalg.cholesky(state.omega)
        return state


def curvature(spec: MlpSpec, f: np.ndarray) -> np.ndarray:
    """Gauss-Newton curvature ``h''(f)`` of the negative log-likelihood."""
    if spec.head == "binary":
        p = expit(f)
        return p * (1.0 - p)
    return np.full_like(np.asarray(f, float), 1.0 / spec.noise_variance)


def fit_laplace(model: Mlp, Z=None, temperature: float = 1.0) -> LaplaceState:
    spec = model.spec
    omega = np.eye(spec.feature_dim) / spec.prior_variance
    if Z is not None and len(Z):
        Z = np.asarray(Z, float)
        G = model.features(Z)
        h = curvature(spec, model.predict(Z))
        omega = omega + (G * h[:, None]).T @ G
    return LaplaceState(model, omega, temperature)


@dataclass
class PosteriorModel:
    """A network, its training data and Laplace state, refreshed together.

    With ``center=True`` a gaussian head is trained on targets minus the
    mean of the initial fit data and the offset is added back on prediction,
    so the weight prior shrinks towards that mean rather than towards zero.
    Binary heads are never shifted.
    """

    spec: MlpSpec
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    refresh_schedule: TrainSchedule | None = None
    temperature: float = 1.0
    seed: int = 0
    state: LaplaceState | None = None
    Z: np.ndarray | None = None
    y: np.ndarray | None = None
    updates: int = 0
    center: bool = False
    offset: float = 0.0

    def _train_targets(self):
        return self.y - self.offset if self.offset else self.y

    def fit(self, Z, y) -> "PosteriorModel":
        Z, y = _check_data(self.spec, Z, y)
        self.Z, self.y = Z, y
        self.offset = float(y.mean()) if self.center and self.spec.head == "gaussian" and len(y) else 0.0
        model = train_map(self.spec, Z, self._train_targets(), self.schedule, seed=self.seed)
        self.state = fit_laplace(model, Z, self.temperature)
        return self

    def update(self, Z, y) -> "PosteriorModel":
        """Append feedback, warm-start training on the pooled data, refit Laplace."""
        Z, y = _check_data(self.spec, Z, y)
        if len(y) == 0:
            return self
        if self.state is None:
            return self.fit(Z, y)
        self.Z = np.vstack([self.Z, Z])
        self.y = np.concatenate([self.y, y])
        self.updates += 1
        sched = self.refresh_schedule or self.schedule
        model = train_map(self.spec, self.Z, self._train_targets(), sched,
                          seed=self.seed + 7919 * self.updates, init=self.state.model)
        self.state = fit_laplace(model, self.Z, self.temperature)
        return self

    def predict_mean(self, Z) -> np.ndarray:
        return self.state.predict_mean(Z) + self.offset

    def predictive_sample(self, Z, rng, tau: float | None = None) -> PosteriorDraw:
        draw = self.state.predictive_sample(Z, rng, tau)
        if not self.offset:
            return draw
        return PosteriorDraw(draw.mean + self.offset, draw.variance, draw.sample + self.offset,
                             draw.output + self.offset)


def gradient_check(model: Mlp, Z, y, step: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    theta = model.get_flat().copy()
    _, grad = model.loss_and_grad(Z, y)
    num = np.empty_like(theta)
    probe = model.copy()
    for k in range(theta.size):
        t = theta.copy()
        t[k] += step
        probe.set_flat(t)
        up, _ = probe.loss_and_grad(Z, y)
        t[k] -= 2 * step
        probe.set_flat(t)
        down, _ = probe.loss_and_grad(Z, y)
        num[k] = (up - down) / (2 * step)
    scale = np.maximum(np.abs(grad) + np.abs(num), 1e-8)
    return float(np.max(np.abs(grad - num) / scale))
