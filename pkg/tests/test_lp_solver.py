import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from banditlp.lp_solver import (
    AllocationProblem,
    GlobalRow,
    InfeasibleSuspected,
    SolverConfig,
    certify,
    default_gamma,
    dual_gradient,
    inner_minimize,
    load_problem,
    problem_to_dict,
    solve,
)
from oracles import grid_block_argmin, vertex_enumeration


def random_problem(rng, max_users=20, max_items=10, max_rows=8, gamma=None):
    U = int(rng.integers(1, max_users + 1))
    I = int(rng.integers(1, max_items + 1))
    M = int(rng.integers(0, max_rows + 1))
    c = -rng.uniform(0, 1, (U, I)) + rng.normal(0, 0.3, (U, I))
    x0 = rng.uniform(0, 0.5, (U, I))
    w = rng.uniform(0, 1, (U, I)) * (rng.random((U, 1)) < 0.7)
    kappa = np.sum(w * x0, axis=1) + rng.uniform(0, 0.5, U)
    rows = []
    for m in range(M):
        mask = rng.random((U, I)) < 0.6
        coef = rng.normal(0, 1, (U, I))
        if rng.random() < 0.3:
            coef = -np.abs(coef)  # minimum-volume style row
        bound = float(np.sum(coef * x0 * mask)) + rng.uniform(0, 0.5)
        rows.append(GlobalRow.from_dense(coef, bound, f"r{m}", mask))
    return AllocationProblem(c, rows, w, kappa, gamma if gamma else default_gamma(c))


class TestInnerMinimize:
    def test_unconstrained_clip(self):
        p = AllocationProblem(-np.ones((3, 4)), gamma=1.0)
        np.testing.assert_array_equal(inner_minimize(p, np.zeros(0)), np.ones((3, 4)))

    def test_zero_objective_gives_zero(self):
        p = AllocationProblem(np.zeros((2, 3)), weights=np.ones((2, 3)), kappa=1.0, gamma=1.0)
        np.testing.assert_array_equal(inner_minimize(p, np.zeros(0)), 0.0)

    def test_symmetric_capped_block(self):
        p = AllocationProblem(-np.ones((1, 3)), weights=np.ones((1, 3)), kappa=2.0, gamma=1.0)
        x = inner_minimize(p, np.zeros(0))
        assert abs(x.sum() - 2.0) <= 1e-9 * 2
        np.testing.assert_allclose(x, [[2 / 3] * 3], atol=1e-9)
        # brute-force grid search at 1e-3 resolution
        ref = grid_block_argmin(-np.ones(3), np.ones(3), 2.0, 1.0)
        np.testing.assert_allclose(x[0], ref, atol=1e-2)

    def test_rejects_negative_multipliers(self):
        p = AllocationProblem(np.zeros((1, 1)), [GlobalRow.from_dense(np.ones((1, 1)), 1.0)])
        with pytest.raises(ValueError):
            inner_minimize(p, np.array([-1.0]))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_matches_grid_search(self, n_items, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(0, 1, n_items)
        w = rng.uniform(0, 1.5, n_items)
        kappa = float(rng.uniform(0, 1.5))
        gamma = float(rng.uniform(0.2, 2.0))
        step = 1e-3 if n_items <= 3 else 2e-2
        p = AllocationProblem(a[None, :], weights=w[None, :], kappa=kappa, gamma=gamma)
        x = inner_minimize(p, np.zeros(0))[0]
        assert w @ x <= kappa + 1e-9 * max(1.0, kappa)
        ref = grid_block_argmin(a, w, kappa, gamma, step=step)
        f = lambda z: a @ z + 0.5 * gamma * z @ z
        # the grid point can never beat the exact minimizer
        assert f(x) <= f(ref) + 1e-12
        # strong convexity bounds the distance to any point by its excess value
        assert np.sum((x - ref) ** 2) <= 2 * (f(ref) - f(x)) / gamma + 1e-9

    def test_blocks_are_independent(self):
        rng = np.random.default_rng(3)
        p = random_problem(rng, max_rows=0)
        full = inner_minimize(p, np.zeros(0))
        for u in range(p.num_users):
            single = AllocationProblem(p.objective[u:u + 1], weights=p.weights[u:u + 1],
                                       kappa=p.kappa[u:u + 1], gamma=p.gamma)
            np.testing.assert_array_equal(inner_minimize(single, np.zeros(0))[0], full[u])


class TestDualGradient:
    def test_zero_row(self):
        p = AllocationProblem(np.zeros((1, 2)), [GlobalRow.from_entries([], 1.0)])
        np.testing.assert_array_equal(dual_gradient(p, np.ones((1, 2))), [-1.0])

    def test_zero_x_zero_bound(self):
        p = AllocationProblem(np.zeros((1, 2)), [GlobalRow.from_dense(np.ones((1, 2)), 0.0)])
        np.testing.assert_array_equal(dual_gradient(p, np.zeros((1, 2))), [0.0])

    def test_arithmetic(self):
        p = AllocationProblem(np.zeros((1, 2)), [GlobalRow.from_dense(np.ones((1, 2)), 1.0)])
        np.testing.assert_allclose(dual_gradient(p, np.array([[0.7, 0.6]])), [0.3])


class TestSolve:
    def test_no_rows_single_iteration(self):
        p = AllocationProblem(-np.ones((2, 3)), weights=np.ones((2, 3)), kappa=1.0, gamma=1.0)
        s = solve(p)
        assert s.converged and s.iterations == 1
        np.testing.assert_allclose(s.x.sum(axis=1), 1.0, atol=1e-9)

    def test_two_by_two_matches_vertex_enumeration(self):
        c = -np.array([[1.0, 2.0], [3.0, 1.0]])
        p = AllocationProblem(c, [GlobalRow.from_dense(np.ones((2, 2)), 1.0, "total")], gamma=1e-3)
        s = solve(p)
        assert s.converged
        opt, xv = vertex_enumeration(p)
        assert opt == pytest.approx(-3.0)
        np.testing.assert_allclose(xv, [0, 0, 1, 0], atol=1e-9)
        assert s.x[1, 0] > 0.99
        assert s.lp_objective == pytest.approx(opt, rel=1e-2)

    def test_minimum_send_row(self):
        # maximize a reward that prefers item 0, but demand at least 2 sends of item 1
        U = 3
        rewards = np.tile([1.0, 0.2], (U, 1))
        need = 2.0
        rows = [GlobalRow.from_dense(-np.ones((U, 2)), -need, "min_sends",
                                     mask=np.tile([False, True], (U, 1)))]
        p = AllocationProblem(-rewards, rows, np.ones((U, 2)), 1.0, gamma=1e-4)
        s = solve(p)
        assert s.converged
        assert s.x[:, 1].sum() >= need - 1e-6 * (1 + need)
        opt, _ = vertex_enumeration(p)
        assert s.lp_objective == pytest.approx(opt, rel=1e-3)

    def test_contradictory_rows_raise(self):
        rows = [GlobalRow.from_dense(np.ones((2, 2)), 1.0, "at_most_1"),
                GlobalRow.from_dense(-np.ones((2, 2)), -3.0, "at_least_3")]
        p = AllocationProblem(np.zeros((2, 2)), rows, gamma=1e-2)
        with pytest.raises(InfeasibleSuspected):
            solve(p, SolverConfig(lambda_ceiling=1e3, stall_window=10))

    def test_dual_ascent_is_monotone(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            s = solve(random_problem(rng))
            assert np.all(np.diff(s.dual_trace) >= 0)

    def test_weak_duality_against_vertex_enumeration(self):
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 25:
            p = random_problem(rng, max_users=2, max_items=3, max_rows=4)
            if p.objective.size > 6:
                continue
            s = solve(p)
            opt, _ = vertex_enumeration(p)
            # the perturbed dual bounds the LP optimum plus the largest possible quadratic term
            qp_bound = opt + 0.5 * p.gamma * p.objective.size
            for g in s.dual_trace:
                assert g <= qp_bound + 1e-9
            checked += 1

    def test_gamma_consistency(self):
        rng = np.random.default_rng(21)
        p = random_problem(rng, max_users=6, max_items=5, max_rows=3)
        objs = []
        for gamma in (1e-3, 1e-5):
            q = AllocationProblem(p.objective, p.rows, p.weights, p.kappa, gamma)
            s = solve(q)
            assert s.converged
            objs.append(s.lp_objective)
        assert objs[0] == pytest.approx(objs[1], rel=1e-2)

    @pytest.mark.parametrize("k", [0.5, 3.0, 40.0])
    def test_scaling_equivariance(self, k):
        rng = np.random.default_rng(8)
        p = random_problem(rng, max_users=8, max_items=6, max_rows=0)
        q = AllocationProblem(k * p.objective, p.rows, p.weights, p.kappa, k * p.gamma)
        np.testing.assert_allclose(solve(q).x, solve(p).x, atol=1e-9)

    def test_scaling_equivariance_with_rows(self):
        rng = np.random.default_rng(9)
        p = random_problem(rng, max_users=8, max_items=6, max_rows=3)
        q = AllocationProblem(4.0 * p.objective, p.rows, p.weights, p.kappa, 4.0 * p.gamma)
        np.testing.assert_allclose(solve(q).x, solve(p).x, atol=1e-4)

    def test_solution_box_and_caps(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            p = random_problem(rng)
            s = solve(p)
            assert np.all(s.x >= 0) and np.all(s.x <= 1)
            load = np.sum(p.weights * s.x, axis=1)
            assert np.all(load <= p.kappa + 1e-9 * np.maximum(1, p.kappa))
            assert s.dual_objective <= s.primal_objective + 1e-4 * (1 + abs(s.primal_objective))


class TestCertify:
    def test_converged_solutions_certify(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            p = random_problem(rng)
            s = solve(p)
            assert s.converged
            cert = certify(p, s)
            assert cert.feasible
            assert cert.rel_gap <= 1e-4

    def test_violating_allocation(self):
        p = AllocationProblem(-np.ones((1, 2)), [GlobalRow.from_dense(np.ones((1, 2)), 1.0)], gamma=1.0)
        s = solve(p)
        bad = type(s)(x=np.array([[1.0, 0.5]]), primal_objective=0, dual_objective=0,
                      lp_objective=0, max_row_violation=0, iterations=0, converged=False,
                      duals=s.duals)
        assert not certify(p, bad).feasible

    def test_gap_recomputation(self):
        c = -np.array([[1.0, 2.0], [3.0, 1.0]])
        p = AllocationProblem(c, [GlobalRow.from_dense(np.ones((2, 2)), 1.0)], gamma=1e-3)
        s = solve(p)
        assert certify(p, s).rel_gap == pytest.approx(s.rel_gap, abs=1e-10)


class TestProblemDocument:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        p = random_problem(rng)
        path = tmp_path / "problem.json"
        path.write_text(json.dumps(problem_to_dict(p)))
        q = load_problem(path)
        np.testing.assert_array_equal(q.objective, p.objective)
        np.testing.assert_array_equal(q.weights, p.weights)
        np.testing.assert_array_equal(q.kappa, p.kappa)
        assert q.gamma == p.gamma
        assert [r.bound for r in q.rows] == [r.bound for r in p.rows]
        np.testing.assert_array_equal(solve(q).x, solve(p).x)

    def test_invalid_index_rejected(self):
        with pytest.raises(ValueError):
            AllocationProblem(np.zeros((1, 2)), [GlobalRow.from_entries([[0, 5, 1.0]], 1.0)])

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            AllocationProblem(np.zeros((1, 2)), weights=-np.ones((1, 2)), kappa=1.0)
