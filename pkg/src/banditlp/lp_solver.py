"""Per-round allocation solver.

Solves the perturbed allocation program

    minimize    c^T x + (gamma / 2) ||x||^2
    subject to  D x <= b                       (global / provider rows)
                sum_i w[u, i] x[u, i] <= kappa[u]   for every user u
                0 <= x <= 1

by projected ascent on the partial Lagrangian dual in which only ``D x <= b``
is dualized.  For a fixed multiplier vector the inner minimization separates
into one small capped-box projection per user.

The solver minimizes; callers that maximize rewards pass ``-rewards``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

BLOCK_TOL = 1e-9
# stop the block search well inside BLOCK_TOL so dual values stay accurate
_BISECT_TOL = 1e-13
_MAX_BISECT = 200


class InfeasibleSuspected(RuntimeError):
    """Dual multipliers diverge while the row violation does not shrink."""

    def __init__(self, message: str, lambda_norm: float, violation: float):
        super().__init__(message)
        self.lambda_norm = lambda_norm
        self.violation = violation


@dataclass(frozen=True)
class GlobalRow:
    """One sparse coupling row ``sum coef * x[user, item] <= bound``."""

    users: np.ndarray
    items: np.ndarray
    coefs: np.ndarray
    bound: float
    label: str = ""

    @classmethod
    def from_dense(cls, coefs: np.ndarray, bound: float, label: str = "",
                   mask: np.ndarray | None = None) -> "GlobalRow":
        """Build a row from a (U, I) coefficient matrix, optionally masked."""
        coefs = np.asarray(coefs, dtype=float)
        support = np.ones(coefs.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if support.shape != coefs.shape:
            support = np.broadcast_to(support, coefs.shape)
        users, items = np.nonzero(support)
        return cls(users, items, coefs[users, items], float(bound), label)

    @classmethod
    def from_entries(cls, entries: Sequence[Sequence[float]], bound: float,
                     label: str = "") -> "GlobalRow":
        arr = np.asarray(entries, dtype=float).reshape(-1, 3)
        return cls(arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64),
                   arr[:, 2].copy(), float(bound), label)


@dataclass
class AllocationProblem:
    """Canonical constrained allocation instance (minimization form).

    ``weights`` and ``kappa`` hold the per-user capped-box blocks; a user whose
    weights are all zero is effectively uncapped.
    """

    objective: np.ndarray
    rows: list[GlobalRow] = field(default_factory=list)
    weights: np.ndarray | None = None
    kappa: np.ndarray | float | None = None
    gamma: float = 1e-3

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.ndim != 2:
            raise ValueError("objective must be a (num_users, num_items) matrix")
        U, I = self.objective.shape
        if self.weights is None:
            self.weights = np.zeros((U, I))
        self.weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (U, I)).copy()
        if self.kappa is None:
            self.kappa = np.full(U, np.inf)
        self.kappa = np.broadcast_to(np.asarray(self.kappa, dtype=float), (U,)).copy()
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValueError("user-block weights must be finite and nonnegative")
        if np.any(self.kappa < 0) or np.any(np.isnan(self.kappa)):
            raise ValueError("user caps must be nonnegative")
        for k, row in enumerate(self.rows):
            if len(row.users) != len(row.items) or len(row.items) != len(row.coefs):
                raise ValueError(f"row {k}: ragged entries")
            if len(row.users) and (row.users.min() < 0 or row.users.max() >= U
                                   or row.items.min() < 0 or row.items.max() >= I):
                raise ValueError(f"row {k} ({row.label!r}) references an index outside {U}x{I}")
            if not math.isfinite(row.bound):
                raise ValueError(f"row {k}: bound must be finite (drop non-binding rows instead)")
        self._matrix = None
        self._dense = None

    @property
    def num_users(self) -> int:
        return self.objective.shape[0]

    @property
    def num_items(self) -> int:
        return self.objective.shape[1]

    @property
    def bounds(self) -> np.ndarray:
        return np.array([row.bound for row in self.rows], dtype=float)

    @property
    def matrix(self) -> sp.csr_matrix:
        """Coupling rows as a CSR matrix over the row-major flattened ``x``."""
        if self._matrix is None:
            I = self.num_items
            if self.rows:
                data = np.concatenate([r.coefs for r in self.rows])
                cols = np.concatenate([r.users * I + r.items for r in self.rows])
                rids = np.concatenate([np.full(len(r.coefs), k) for k, r in enumerate(self.rows)])
            else:
                data = cols = rids = np.zeros(0)
            self._matrix = sp.csr_matrix((data, (rids.astype(np.int64), cols.astype(np.int64))),
                                         shape=(len(self.rows), self.objective.size))
        return self._matrix

    @property
    def dense_rows(self) -> np.ndarray:
        """Coupling rows as a dense (rows, U, I) array."""
        if self._dense is None:
            self._dense = self.matrix.toarray().reshape(len(self.rows), *self.objective.shape)
        return self._dense

    def row_activity(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ np.ravel(x)

    def qp_objective(self, x: np.ndarray) -> float:
        return float(np.sum(self.objective * x) + 0.5 * self.gamma * np.sum(x * x))


@dataclass
class DualState:
    lam: np.ndarray
    step_size: float
    iteration: int = 0

    def __post_init__(self):
        if np.any(self.lam < 0):
            raise ValueError("dual multipliers must be nonnegative")


@dataclass(frozen=True)
class Solution:
    x: np.ndarray
    primal_objective: float
    dual_objective: float
    lp_objective: float
    max_row_violation: float
    iterations: int
    converged: bool
    duals: np.ndarray
    dual_trace: tuple[float, ...] = ()

    @property
    def rel_gap(self) -> float:
        return (self.primal_objective - self.dual_objective) / (1.0 + abs(self.primal_objective))

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "primal_objective": self.primal_objective,
            "dual_objective": self.dual_objective,
            "lp_objective": self.lp_objective,
            "rel_gap": self.rel_gap,
            "max_row_violation": self.max_row_violation,
            "iterations": self.iterations,
            "converged": self.converged,
            "duals": self.duals.tolist(),
        }


@dataclass
class SolverConfig:
    max_iters: int = 5000
    eps_feas: float = 1e-6
    eps_gap: float = 1e-4
    initial_step: float | None = None
    lambda_ceiling: float = 1e9
    stall_window: int = 50
    relative_feasibility: bool = False  # scale eps_feas by 1 + max|b|


def _shifted_costs(problem: AllocationProblem, lam: np.ndarray) -> np.ndarray:
    if len(lam) == 0:
        return problem.objective
    shift = (problem.matrix.T @ lam).reshape(problem.objective.shape)
    return problem.objective + shift


def _block_load(a, w, gamma, mu):
    x = np.clip(-(a + mu[:, None] * w) / gamma, 0.0, 1.0)
    return x, np.sum(w * x, axis=1)


def project_blocks(a: np.ndarray, w: np.ndarray, kappa: np.ndarray, gamma: float,
                   return_multipliers: bool = False):
    """Row-wise argmin of ``a.x + gamma/2 |x|^2`` over ``{0<=x<=1, w.x<=kappa}``.

    Capped rows are handled by bisection on the block multiplier.  Each sweep
    also tries the secant point of the current bracket, which lands exactly
    once the bracket sits inside one linear piece of the load curve.
    """
    x = np.clip(-a / gamma, 0.0, 1.0)
    mu = np.zeros(len(a))
    load = np.sum(w * x, axis=1)
    tol = _BISECT_TOL * np.maximum(1.0, kappa)
    active = np.flatnonzero(load > kappa + tol)
    if active.size == 0:
        return (x, mu) if return_multipliers else x

    aa, ww, kk, tt = a[active], w[active], kappa[active], tol[active]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ww > 0, -aa / ww, -np.inf)
    lo = np.zeros(active.size)
    hi = np.maximum(ratio.max(axis=1), 0.0)
    s_lo = load[active]
    s_hi = np.zeros(active.size)
    mu_act = hi.copy()
    done = np.zeros(active.size, dtype=bool)

    def secant():
        denom = s_lo - s_hi
        safe = np.where(denom > 0, denom, 1.0)
        guess = np.where(denom > 0, lo + (s_lo - kk) * (hi - lo) / safe, 0.5 * (lo + hi))
        return np.clip(guess, lo, hi)

    for _ in range(_MAX_BISECT):
        if done.all():
            break
        for make in (secant, lambda: 0.5 * (lo + hi)):
            idx = np.flatnonzero(~done)
            if idx.size == 0:
                break
            cand = make()
            _, s = _block_load(aa[idx], ww[idx], gamma, cand[idx])
            hit = np.abs(s - kk[idx]) <= tt[idx]
            # bracket no wider than float resolution: take the feasible end
            flat = ~hit & (hi[idx] - lo[idx] <= 4 * np.finfo(float).eps * np.maximum(hi[idx], 1e-300))
            cand = cand.copy()
            cand[idx[flat]] = hi[idx[flat]]
            hit |= flat
            mu_act[idx[hit]] = cand[idx[hit]]
            done[idx[hit]] = True
            over = ~hit & (s > kk[idx])
            under = ~hit & ~over
            lo[idx[over]] = cand[idx[over]]
            s_lo[idx[over]] = s[over]
            hi[idx[under]] = cand[idx[under]]
            s_hi[idx[under]] = s[under]
    if not done.all():
        # bracket exhausted in floating point; the upper end is feasible
        mu_act[~done] = hi[~done]
    x[active] = np.clip(-(aa + mu_act[:, None] * ww) / gamma, 0.0, 1.0)
    mu[active] = mu_act
    return (x, mu) if return_multipliers else x


def inner_minimize(problem: AllocationProblem, lam: np.ndarray | DualState) -> np.ndarray:
    """Minimize the partial Lagrangian over the per-user capped boxes."""
    return _inner(problem, lam)[0]


def _inner(problem, lam):
    if isinstance(lam, DualState):
        lam = lam.lam
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("dual multipliers must be nonnegative")
    a = _shifted_costs(problem, lam)
    return project_blocks(a, problem.weights, problem.kappa, problem.gamma, return_multipliers=True)


def dual_gradient(problem: AllocationProblem, x: np.ndarray) -> np.ndarray:
    """Supergradient ``D x - b`` of the dual function."""
    return problem.row_activity(x) - problem.bounds


def _dual_value(problem, lam, x, grad, mu=None):
    value = problem.qp_objective(x) + float(lam @ grad)
    if mu is not None and mu.any():
        # block multiplier term: makes the value insensitive to the block search tolerance
        capped = mu > 0
        slack = np.sum(problem.weights[capped] * x[capped], axis=1) - problem.kappa[capped]
        value += float(mu[capped] @ slack)
    return value


def _curvature(problem: AllocationProblem, x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Generalized negative Hessian of the dual at the point producing ``x``.

    Only coordinates strictly inside the box move with the multipliers; in a
    block whose cap binds they move on the hyperplane ``w.x = kappa``.
    """
    rows = problem.dense_rows
    free = (x > 0.0) & (x < 1.0)
    df = rows * free
    H = np.einsum("kui,lui->kl", df, df)
    capped = np.flatnonzero(mu > 0)
    if capped.size:
        wf = problem.weights[capped] * free[capped]
        norm = np.sum(wf * wf, axis=1)
        keep = norm > 0
        if keep.any():
            s = np.einsum("kui,ui->ku", df[:, capped[keep]], wf[keep])
            H -= (s / norm[keep]) @ s.T
    return H / problem.gamma


def _line_search(problem, lam, d, g0, grad0, max_evals: int = 60, lam_cap: float = math.inf):
    """Search ``t`` along the projected path ``max(0, lam + t d)``.

    Returns the accepted ``(lam, x, mu, grad, g)`` and its ``t``, or ``None``
    when no trial point raises the dual objective.  A point is accepted as soon
    as the directional derivative has dropped to a tenth of its initial value;
    otherwise the step is expanded while the derivative stays positive and
    then bisected on its sign.  Expansion stops once a multiplier passes
    ``lam_cap``, so an unbounded dual cannot run off to overflow.
    """
    slope0 = float(grad0 @ np.where((lam > 0) | (d > 0), d, 0.0))
    if slope0 <= 0:
        return None, 0.0

    def evaluate(t):
        lam_t = np.maximum(0.0, lam + t * d)
        x_t, mu_t = _inner(problem, lam_t)
        grad_t = dual_gradient(problem, x_t)
        g_t = _dual_value(problem, lam_t, x_t, grad_t, mu_t)
        slope = float(grad_t @ np.where(lam_t > 0, d, 0.0))
        return (lam_t, x_t, mu_t, grad_t, g_t), slope

    best, best_t = None, 0.0
    lo, hi = 0.0, math.inf
    t = 1.0
    for _ in range(max_evals):
        point, slope = evaluate(t)
        gain = point[4] >= g0 and np.any(point[0] != lam)
        if gain and (best is None or point[4] >= best[4]):
            best, best_t = point, t
        if gain and abs(slope) <= 0.1 * slope0:
            break
        if gain and slope > 0:
            lo = t
        else:
            hi = t
        if not math.isfinite(hi):
            if gain and np.max(point[0]) > lam_cap:
                break
            t *= 4.0
        else:
            if hi - lo <= 1e-12 * hi:
                break
            t = 0.5 * (lo + hi)
    return best, best_t


def solve(problem: AllocationProblem, config: SolverConfig | None = None,
          warm_start: np.ndarray | None = None) -> Solution:
    """Maximize the partial Lagrangian dual over ``lambda >= 0``.

    Each iteration takes a projected, damped Newton step
    ``d = (H + rho I)^-1 grad`` on the rows not pinned at zero, where ``H`` is
    the generalized curvature of the (piecewise quadratic) dual.  ``rho``
    starts at the dual's Lipschitz constant, which makes the first trial an
    ordinary projected gradient step of length ``1/L``; it is doubled (the step
    shrinks) whenever the dual objective fails to increase and relaxed after
    each accepted step, so iterations turn into plain Newton steps near the
    optimum.  Raises :class:`InfeasibleSuspected` when the multipliers blow
    past ``config.lambda_ceiling`` without the row violation improving.
    """
    cfg = config or SolverConfig()
    M = len(problem.rows)
    b = problem.bounds
    feas_tol = cfg.eps_feas * (1.0 + (np.max(np.abs(b)) if M and cfg.relative_feasibility else 0.0))

    lam = np.zeros(M) if warm_start is None else np.maximum(np.asarray(warm_start, float), 0.0)
    x, mu = _inner(problem, lam)
    grad = dual_gradient(problem, x)
    g = _dual_value(problem, lam, x, grad, mu)

    def status(x, grad, g):
        primal = problem.qp_objective(x)
        viol = max(0.0, float(grad.max())) if M else 0.0
        gap = (primal - g) / (1.0 + abs(primal))
        return primal, viol, gap

    trace = [g]

    def package(lam, x, g, it, converged):
        primal, viol, _ = status(x, dual_gradient(problem, x), g)
        return Solution(x=x, primal_objective=primal, dual_objective=g,
                        lp_objective=float(np.sum(problem.objective * x)),
                        max_row_violation=viol, iterations=it, converged=converged,
                        duals=lam.copy(), dual_trace=tuple(trace))

    if M == 0:
        return package(lam, x, g, 1, True)

    fro2 = float(problem.matrix.multiply(problem.matrix).sum())
    lipschitz = max(fro2, 1e-300) / problem.gamma
    rho = 1.0 / cfg.initial_step if cfg.initial_step else lipschitz
    rho_floor = 1e-12 * lipschitz
    rho_ceiling = 1e6 * lipschitz
    scale_c = 1.0 + float(np.max(np.abs(problem.objective)))
    min_coef = float(np.min(np.abs(problem.matrix.data[problem.matrix.data != 0]), initial=1.0))
    ceiling = cfg.lambda_ceiling * scale_c / max(min_coef, 1e-300)

    best = (math.inf, lam, x, g)
    viol_hist: list[float] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        _, viol, gap = status(x, grad, g)
        score = max(viol / feas_tol, gap / cfg.eps_gap)
        if score < best[0]:
            best = (score, lam, x, g)
        if viol <= feas_tol and gap <= cfg.eps_gap:
            return package(lam, x, g, it, True)

        lam_norm = float(np.max(lam))
        viol_hist.append(viol)
        if lam_norm > ceiling and len(viol_hist) > cfg.stall_window:
            old = viol_hist[-cfg.stall_window - 1]
            if viol >= 0.99 * old:
                raise InfeasibleSuspected(
                    f"multipliers reached {lam_norm:.3g} with row violation stuck at {viol:.3g}",
                    lam_norm, viol)

        free = ~((lam <= 0.0) & (grad < 0.0))
        if not free.any():
            break
        H = _curvature(problem, x, mu)[np.ix_(free, free)]
        d = np.zeros(M)
        d[free] = np.linalg.solve(H + rho * np.eye(H.shape[0]), grad[free])
        accepted, t = _line_search(problem, lam, d, g, grad, lam_cap=ceiling)
        if accepted is None:
            logger.debug("dual ascent stalled at iteration %d", it)
            break
        # shrink the damping after long steps, grow it after short ones
        rho = min(max(rho * (0.25 if t >= 1.0 else 2.0), rho_floor), rho_ceiling)
        lam, x, mu, grad, g = accepted
        trace.append(g)

    _, viol, _ = status(x, grad, g)
    if float(np.max(lam)) > ceiling and viol > feas_tol:
        raise InfeasibleSuspected(
            f"dual ascent ended with multipliers at {float(np.max(lam)):.3g} "
            f"and row violation {viol:.3g}", float(np.max(lam)), viol)
    _, lam, x, g = best
    _, viol, gap = status(x, dual_gradient(problem, x), g)
    return package(lam, x, g, it, viol <= feas_tol and gap <= cfg.eps_gap)


@dataclass(frozen=True)
class Certificate:
    feasible: bool
    rel_gap: float
    max_row_violation: float
    max_cap_violation: float


def _exact_block_argmin(a: np.ndarray, w: np.ndarray, kappa: float, gamma: float) -> np.ndarray:
    """Single-block argmin by enumerating the kinks of the load curve."""
    x = np.clip(-a / gamma, 0.0, 1.0)
    if w @ x <= kappa:
        return x
    pos = w > 0
    kinks = np.unique(np.concatenate([-a[pos] / w[pos], (-a[pos] - gamma) / w[pos], [0.0]]))
    kinks = kinks[kinks >= 0]

    def load(mu):
        return float(w @ np.clip(-(a + mu * w) / gamma, 0.0, 1.0))

    loads = np.array([load(m) for m in kinks])
    # load is nonincreasing in mu; find the piece containing kappa
    j = int(np.searchsorted(-loads, -kappa, side="left"))
    if j < len(kinks) and loads[j] == kappa:
        mu = kinks[j]
    else:
        m0, m1 = kinks[j - 1], kinks[j]
        s0, s1 = loads[j - 1], loads[j]
        mu = m0 + (s0 - kappa) * (m1 - m0) / (s0 - s1)
    return np.clip(-(a + mu * w) / gamma, 0.0, 1.0)


def certify(problem: AllocationProblem, solution: Solution,
            eps_feas: float = 1e-6, relative: bool = False) -> Certificate:
    """Recheck feasibility and the duality gap without the solver's code path.

    Row violations are compared with ``eps_feas`` directly, or with
    ``eps_feas * (1 + max|b|)`` when ``relative`` is set.
    """
    U, I = problem.objective.shape
    x = np.asarray(solution.x, dtype=float)
    lam = np.asarray(solution.duals, dtype=float)
    dense = np.zeros((len(problem.rows), U, I))
    for k, row in enumerate(problem.rows):
        np.add.at(dense[k], (row.users, row.items), row.coefs)
    b = problem.bounds
    activity = np.einsum("kui,ui->k", dense, x)
    row_viol = float(max(0.0, np.max(activity - b))) if len(b) else 0.0
    cap_viol = float(max(0.0, np.max(np.sum(problem.weights * x, axis=1) - problem.kappa)))
    box_ok = bool(np.all(x >= 0.0) and np.all(x <= 1.0))
    scale_b = 1.0 + (float(np.max(np.abs(b))) if len(b) and relative else 0.0)
    cap_tol = 10 * BLOCK_TOL * float(np.max(np.maximum(1.0, np.where(np.isfinite(problem.kappa), problem.kappa, 1.0))))
    feasible = box_ok and row_viol <= eps_feas * scale_b and cap_viol <= cap_tol

    shifted = problem.objective + np.einsum("k,kui->ui", lam, dense)
    xl = np.vstack([_exact_block_argmin(shifted[u], problem.weights[u], problem.kappa[u], problem.gamma)
                    for u in range(U)])
    dual = float(np.sum(problem.objective * xl) + 0.5 * problem.gamma * np.sum(xl * xl)
                 + lam @ (np.einsum("kui,ui->k", dense, xl) - b))
    primal = float(np.sum(problem.objective * x) + 0.5 * problem.gamma * np.sum(x * x))
    return Certificate(feasible=feasible, rel_gap=(primal - dual) / (1.0 + abs(primal)),
                       max_row_violation=row_viol, max_cap_violation=cap_viol)


def default_gamma(objective: np.ndarray, relative: float = 1e-3) -> float:
    """``relative * max|c|``, floored so an all-zero objective still works."""
    scale = float(np.max(np.abs(objective))) if np.size(objective) else 0.0
    return relative * scale if scale > 0 else relative


# -- problem documents -------------------------------------------------------

def problem_from_dict(doc: dict) -> AllocationProblem:
    U, I = int(doc["num_users"]), int(doc["num_items"])
    objective = np.asarray(doc["objective"], dtype=float).reshape(U, I)
    rows = [GlobalRow.from_entries(r.get("entries", []), r["bound"], r.get("label", f"row{k}"))
            for k, r in enumerate(doc.get("rows", []))]
    caps = doc.get("user_caps") or {}
    weights = caps.get("weights")
    weights = None if weights is None else np.asarray(weights, dtype=float).reshape(U, I)
    kappa = caps.get("kappa")
    if kappa is not None:
        kappa = np.asarray(kappa, dtype=float)
    gamma = doc.get("gamma")
    if gamma is None:
        gamma = default_gamma(objective)
    return AllocationProblem(objective, rows, weights, kappa, float(gamma))


def problem_to_dict(problem: AllocationProblem) -> dict:
    return {
        "num_users": problem.num_users,
        "num_items": problem.num_items,
        "gamma": problem.gamma,
        "objective": problem.objective.ravel().tolist(),
        "rows": [{"label": r.label, "bound": r.bound,
                  "entries": [[int(u), int(i), float(c)] for u, i, c in zip(r.users, r.items, r.coefs)]}
                 for r in problem.rows],
        "user_caps": {"weights": problem.weights.ravel().tolist(),
                      "kappa": [k if math.isfinite(k) else None for k in problem.kappa.tolist()]},
    }


def load_problem(path: str | Path) -> AllocationProblem:
    doc = json.loads(Path(path).read_text())
    caps = doc.get("user_caps") or {}
    if isinstance(caps.get("kappa"), list):
        caps["kappa"] = [math.inf if k is None else k for k in caps["kappa"]]
    return problem_from_dict(doc)
