import numpy as np
import pytest
from scipy.special import expit

from dtrlab.stats import (
    ConvergenceError,
    EvaluationError,
    OptimizerConfig,
    SingularDesignError,
    logistic_fit,
    maximize,
    ols_fit,
    solve_joint_linear_ee,
)


class TestOls:
    def test_exact_interpolation(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0]])
        fit = ols_fit(X, np.array([2.0, 4.0]))
        np.testing.assert_allclose(fit.coefficients, [2.0, 2.0], atol=1e-12)

    def test_duplicated_column_names_offender(self):
        X = np.column_stack([np.ones(5), np.arange(5.0), np.arange(5.0)])
        with pytest.raises(SingularDesignError) as err:
            ols_fit(X, np.arange(5.0), column_names=["1", "x", "x_copy"])
        assert err.value.columns  # names the offending column set
        assert set(err.value.columns) <= {"x", "x_copy"}

    def test_unit_weights_match_unweighted_and_oracle(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(5), rng.normal(size=5)])
        y = rng.normal(size=5)
        plain = ols_fit(X, y).coefficients
        weighted = ols_fit(X, y, weights=np.ones(5)).coefficients
        oracle = np.linalg.solve(X.T @ X, X.T @ y)  # normal equations
        np.testing.assert_allclose(plain, weighted, atol=1e-12)
        np.testing.assert_allclose(plain, oracle, atol=1e-10)

    def test_residual_orthogonality_invariant(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n, p = rng.integers(5, 60), rng.integers(1, 4)
            X = rng.normal(size=(n, p))
            y = rng.normal(size=n) * rng.uniform(0.1, 50)
            w = rng.uniform(0.1, 3.0, size=n)
            fit = ols_fit(X, y, weights=w)
            grad = X.T @ (w * fit.residuals)
            assert np.max(np.abs(grad)) <= 1e-8 * (1 + np.max(np.abs(y)))

    def test_weighted_normal_equations(self):
        rng = np.random.default_rng(11)
        X = np.column_stack([np.ones(30), rng.normal(size=30)])
        y = rng.normal(size=30)
        w = rng.uniform(0.2, 2.0, 30)
        oracle = np.linalg.solve(X.T @ (X * w[:, None]), X.T @ (w * y))
        fit = ols_fit(X, y, weights=w)
        np.testing.assert_allclose(fit.coefficients, oracle, atol=1e-10)


def _loglik(X, a, beta):
    p = np.clip(expit(X @ beta), 1e-12, 1 - 1e-12)
    return float(np.sum(a * np.log(p) + (1 - a) * np.log1p(-p)))


class TestLogistic:
    def test_intercept_only_closed_form(self):
        rng = np.random.default_rng(1)
        a = (rng.random(200) < 0.5).astype(float)
        fit = logistic_fit(np.ones((200, 1)), a)
        expected = np.log(a.mean() / (1 - a.mean()))
        assert fit.converged
        np.testing.assert_allclose(fit.coefficients, [expected], atol=1e-8)

    def test_score_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(30, 10, 100)
        a = (rng.random(100) < expit(-3 + 0.1 * x)).astype(float)
        X = np.column_stack([np.ones(100), x])
        fit = logistic_fit(X, a)
        assert fit.converged and fit.score_norm <= 1e-6
        h = 1e-5
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            fd = (_loglik(X, a, fit.coefficients + e)
                  - _loglik(X, a, fit.coefficients - e)) / (2 * h)
            assert abs(fd) <= 1e-5 * (1 + abs(_loglik(X, a, fit.coefficients)))

    def test_single_class_requires_override(self):
        X = np.ones((20, 1))
        a = np.zeros(20)
        with pytest.raises(ValueError, match="single class"):
            logistic_fit(X, a)
        fit = logistic_fit(X, a, allow_single_class=True)
        # Drifts towards -inf; the iteration budget guards the blow-up.
        assert fit.coefficients[0] < -10
        assert fit.iterations <= 100

    def test_perfect_separation_raises(self):
        x = np.concatenate([np.linspace(-3, -1, 10), np.linspace(1, 3, 10)])
        a = (x > 0).astype(float)
        X = np.column_stack([np.ones(20), x])
        with pytest.raises(ConvergenceError, match="separated"):
            logistic_fit(X, a)


class TestJointEe:
    def test_propensity_equal_to_actions_is_singular(self):
        rng = np.random.default_rng(3)
        R = np.column_stack([np.ones(12), rng.normal(size=12)])
        a = (rng.random(12) < 0.5).astype(float)
        with pytest.raises(SingularDesignError):
            solve_joint_linear_ee(R, a, None, a, rng.normal(size=12))

    def test_four_row_toy_matches_hand_solution(self):
        # Null treatment-free block: sum_i R_i (v - a R'psi)(a - pi) = 0 is a
        # 2x2 linear system assembled and solved here independently.
        R = np.array([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0], [1.0, 3.0]])
        a = np.array([1.0, 0.0, 1.0, 0.0])
        pi = np.array([0.4, 0.5, 0.6, 0.3])
        v = np.array([2.0, 1.0, -1.0, 0.5])
        M = np.zeros((2, 2))
        b = np.zeros(2)
        for i in range(4):
            w = a[i] - pi[i]
            M += w * a[i] * np.outer(R[i], R[i])
            b += w * v[i] * R[i]
        hand = np.linalg.solve(M, b)
        fit = solve_joint_linear_ee(R, a, None, pi, v)
        np.testing.assert_allclose(fit.psi, hand, atol=1e-10)
        assert fit.xi is None
        assert fit.relative_residual <= 1e-8

    def test_joint_solve_zeroes_both_equation_blocks(self):
        rng = np.random.default_rng(4)
        n = 40
        R = np.column_stack([np.ones(n), rng.normal(size=n)])
        D = np.column_stack([np.ones(n), rng.normal(size=n),
                             rng.normal(size=n)])
        a = (rng.random(n) < 0.5).astype(float)
        pi = np.clip(rng.random(n), 0.2, 0.8)
        v = rng.normal(size=n)
        fit = solve_joint_linear_ee(R, a, D, pi, v)
        resid = v - a * (R @ fit.psi) - D @ fit.xi
        eq1 = R.T @ (resid * (a - pi))
        eq2 = D.T @ resid
        scale = 1 + np.max(np.abs(v))
        assert np.max(np.abs(eq1)) <= 1e-8 * scale * n
        assert np.max(np.abs(eq2)) <= 1e-8 * scale * n


class TestMaximize:
    def test_smooth_quadratic(self):
        config = OptimizerConfig(method="nelder_mead", start=[0.0])
        x, value, evals = maximize(lambda t: -(t[0] - 3.0) ** 2, config)
        assert abs(x[0] - 3.0) <= 1e-4
        assert evals > 0

    def test_step_objective_on_grid(self):
        config = OptimizerConfig(method="grid_then_nelder_mead",
                                 grid=[[0.0, 0.5, 1.5, 2.0]])
        x, value, _ = maximize(lambda t: float(t[0] > 1.0), config)
        assert value == 1.0
        assert x[0] in (1.5, 2.0) or x[0] > 1.0

    def test_never_below_best_grid_value(self):
        rng = np.random.default_rng(9)
        noisy = lambda t: float(np.floor(3 * np.sin(t[0]) + 2 * np.cos(t[1])))
        grid = [np.linspace(-3, 3, 9), np.linspace(-3, 3, 9)]
        best_grid = max(noisy(np.array([u, v])) for u in grid[0]
                        for v in grid[1])
        config = OptimizerConfig(method="grid_then_nelder_mead", grid=grid)
        _, value, _ = maximize(noisy, config)
        assert value >= best_grid

    def test_multi_start_picks_best_basin(self):
        f = lambda t: -min((t[0] - 2) ** 2, (t[0] + 2) ** 2 + 0.5)
        config = OptimizerConfig(method="multi_start",
                                 starts=[[-3.0], [3.0]])
        x, value, _ = maximize(f, config)
        assert abs(x[0] - 2.0) < 1e-3

    def test_non_finite_objective_raises_with_point(self):
        config = OptimizerConfig(method="nelder_mead", start=[0.0])
        with pytest.raises(EvaluationError) as err:
            maximize(lambda t: float("nan"), config)
        assert err.value.point is not None
