import warnings

import numpy as np
import pytest

from splatalign import (
    SinkhornConfig,
    build_cost_matrix,
    dump_plan,
    exact_ot_oracle,
    mw2_distance,
    gaussian_w2_sq,
    sinkhorn_log,
    sinkhorn_plain,
)
from splatalign.errors import DimensionMismatchError, NotConvergedWarning, TooLargeError
from splatalign.sinkhorn import ABSOLUTE

from helpers import random_mixture


def uniform(n):
    return np.full(n, 1.0 / n)


class TestSinkhornLog:
    def test_single_cell(self):
        plan = sinkhorn_log(np.array([[3.7]]), [1.0], [1.0], SinkhornConfig(0.5))
        np.testing.assert_allclose(plan.coupling, [[1.0]], atol=1e-12)
        assert abs(plan.cost - 3.7) <= 1e-12

    def test_two_by_two_sharp(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan = sinkhorn_log(C, uniform(2), uniform(2), SinkhornConfig(0.01, epsilon_scale_mode=ABSOLUTE))
        np.testing.assert_allclose(plan.coupling, np.diag([0.5, 0.5]), atol=1e-3)
        assert plan.cost <= 1e-3

    def test_marginal_feasibility_random(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            m, n = rng.integers(2, 40, size=2)
            C = rng.uniform(0.0, 5.0, size=(m, n))
            wa = rng.uniform(0.5, 1.5, m)
            wa /= wa.sum()
            wb = rng.uniform(0.5, 1.5, n)
            wb /= wb.sum()
            plan = sinkhorn_log(C, wa, wb, SinkhornConfig(0.05))
            assert plan.converged
            assert plan.marginal_error <= 1e-6
            assert plan.coupling.min() >= 0.0

    def test_agrees_with_plain_reference(self):
        rng = np.random.default_rng(1)
        C = rng.uniform(0.0, 2.0, size=(6, 5))
        wa = uniform(6)
        wb = uniform(5)
        cfg = SinkhornConfig(0.3, max_iterations=5000, convergence_delta=1e-13, epsilon_scale_mode=ABSOLUTE)
        a = sinkhorn_log(C, wa, wb, cfg)
        b = sinkhorn_plain(C, wa, wb, cfg)
        assert np.abs(a.coupling - b.coupling).max() <= 1e-9
        assert abs(a.cost - b.cost) <= 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            sinkhorn_log(np.zeros((2, 2)), uniform(3), uniform(2))

    def test_not_converged_flagged_and_returned(self):
        rng = np.random.default_rng(2)
        C = rng.uniform(0.0, 10.0, size=(20, 20))
        cfg = SinkhornConfig(1e-4, max_iterations=3, epsilon_scale_mode=ABSOLUTE)
        with pytest.warns(NotConvergedWarning):
            plan = sinkhorn_log(C, uniform(20), uniform(20), cfg)
        assert not plan.converged
        assert plan.iterations_used == 3
        assert plan.coupling.shape == (20, 20)

    def test_no_overflow_with_huge_costs(self):
        rng = np.random.default_rng(3)
        C = rng.uniform(0.0, 1e6, size=(12, 12))
        cfg = SinkhornConfig(1e-4, max_iterations=50, epsilon_scale_mode=ABSOLUTE)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            plan = sinkhorn_log(C, uniform(12), uniform(12), cfg)
        assert np.isfinite(plan.coupling).all()
        assert np.isfinite(plan.cost)
        assert np.isfinite(plan.log_u).all() and np.isfinite(plan.log_v).all()

    def test_entropic_monotonicity(self):
        rng = np.random.default_rng(4)
        C = rng.uniform(0.0, 3.0, size=(10, 10))
        wa = wb = uniform(10)
        costs = []
        for eps_rel in (1.0, 0.3, 0.1, 0.03):
            cfg = SinkhornConfig(eps_rel, max_iterations=20000, convergence_delta=1e-12)
            costs.append(sinkhorn_log(C, wa, wb, cfg).cost)
        for hi, lo in zip(costs, costs[1:]):
            assert lo <= hi + 1e-9


class TestExactOracle:
    def test_two_by_two(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        coupling, cost = exact_ot_oracle(C, uniform(2), uniform(2))
        assert cost == 0.0
        np.testing.assert_allclose(coupling, np.diag([0.5, 0.5]))

    def test_single_cell(self):
        coupling, cost = exact_ot_oracle(np.array([[1.0]]), [1.0], [1.0])
        assert cost == 1.0

    def test_brute_force_agrees_with_simplex(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            C = rng.uniform(0.0, 4.0, size=(6, 6))
            _, brute = exact_ot_oracle(C, uniform(6), uniform(6))
            # force the simplex path with weights that are not exactly uniform
            w = np.full(6, 1.0 / 6)
            alloc, lp = _simplex_cost(C, w, w)
            assert abs(brute - lp) <= 1e-10

    def test_general_weights_against_linprog(self):
        from scipy.optimize import linprog

        rng = np.random.default_rng(6)
        for _ in range(15):
            m, n = int(rng.integers(2, 8)), int(rng.integers(2, 8))
            if m * n > 64:
                continue
            C = rng.uniform(0.0, 5.0, size=(m, n))
            wa = rng.uniform(0.2, 1.0, m)
            wa /= wa.sum()
            wb = rng.uniform(0.2, 1.0, n)
            wb /= wb.sum()
            alloc, cost = exact_ot_oracle(C, wa, wb)
            assert np.abs(alloc.sum(1) - wa).max() <= 1e-12
            assert np.abs(alloc.sum(0) - wb).max() <= 1e-12
            a_eq = np.zeros((m + n, m * n))
            for i in range(m):
                a_eq[i, i * n : (i + 1) * n] = 1.0
            for j in range(n):
                a_eq[m + j, j::n] = 1.0
            res = linprog(C.ravel(), A_eq=a_eq, b_eq=np.concatenate([wa, wb]), bounds=(0, None), method="highs")
            assert abs(cost - res.fun) <= 1e-9

    def test_too_large(self):
        with pytest.raises(TooLargeError):
            exact_ot_oracle(np.zeros((9, 9)), uniform(9), uniform(9))

    def test_epsilon_to_zero_consistency(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            C = rng.uniform(0.5, 4.0, size=(6, 6))
            _, exact = exact_ot_oracle(C, uniform(6), uniform(6))
            cfg = SinkhornConfig(1e-3, max_iterations=200000, convergence_delta=1e-12)
            approx = sinkhorn_log(C, uniform(6), uniform(6), cfg).cost
            assert abs(approx - exact) <= 0.01 * exact


def _simplex_cost(C, wa, wb):
    from splatalign.sinkhorn import _transportation_simplex

    return _transportation_simplex(C, np.asarray(wa, float), np.asarray(wb, float))


class TestMw2Distance:
    def test_single_component_equals_w2(self):
        rng = np.random.default_rng(8)
        A = random_mixture(rng, 1)
        B = random_mixture(rng, 1)
        dist, plan = mw2_distance(A, B, SinkhornConfig(0.5))
        expected = gaussian_w2_sq(A.component(0), B.component(0))
        assert abs(dist**2 - expected) <= 1e-9 * max(1.0, expected)

    def test_self_distance_near_floor(self):
        rng = np.random.default_rng(9)
        G = random_mixture(rng, 8)
        cfg = SinkhornConfig(1e-3, max_iterations=100000, convergence_delta=1e-12)
        dist, _ = mw2_distance(G, G, cfg)
        mean_cost = build_cost_matrix(G, G).mean()
        assert dist**2 <= 0.01 * mean_cost

    def test_symmetry(self):
        rng = np.random.default_rng(10)
        A = random_mixture(rng, 6)
        B = random_mixture(rng, 7)
        cfg = SinkhornConfig(0.05, max_iterations=50000, convergence_delta=1e-12)
        d_ab, _ = mw2_distance(A, B, cfg)
        d_ba, _ = mw2_distance(B, A, cfg)
        assert abs(d_ab - d_ba) <= 1e-7 * max(d_ab, 1e-12)

    def test_cost_decreases_toward_oracle(self):
        rng = np.random.default_rng(11)
        A = random_mixture(rng, 5)
        B = random_mixture(rng, 5)
        C = build_cost_matrix(A, B)
        _, oracle_cost = exact_ot_oracle(C, uniform(5), uniform(5))
        prev = np.inf
        for eps in (1.0, 0.1, 0.01):
            cfg = SinkhornConfig(eps, max_iterations=100000, convergence_delta=1e-12)
            cost = sinkhorn_log(C, uniform(5), uniform(5), cfg).cost
            assert cost <= prev + 1e-9
            assert cost >= oracle_cost - 1e-9
            prev = cost

    def test_requires_normalized_weights(self):
        rng = np.random.default_rng(12)
        A = random_mixture(rng, 3)
        bad = A.replace(weights=A.weights * 2.0)
        with pytest.raises(ValueError):
            mw2_distance(bad, A)


class TestDumpPlan:
    def test_text_round_trip(self, tmp_path):
        rng = np.random.default_rng(13)
        C = rng.uniform(0.0, 1.0, size=(3, 4))
        plan = sinkhorn_log(C, uniform(3), uniform(4), SinkhornConfig(0.1))
        path = tmp_path / "plan.txt"
        dump_plan(plan, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "# transport_plan rows=3 cols=4 layout=row-major"
        grid = np.array([[float(v) for v in line.split()] for line in lines[1:]])
        np.testing.assert_allclose(grid, plan.coupling, rtol=1e-15)

    def test_npy_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        C = rng.uniform(0.0, 1.0, size=(2, 2))
        plan = sinkhorn_log(C, uniform(2), uniform(2), SinkhornConfig(0.1))
        path = tmp_path / "plan.npy"
        dump_plan(plan, path, fmt="npy")
        np.testing.assert_array_equal(np.load(path), plan.coupling)
