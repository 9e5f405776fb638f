import numpy as np
import pytest

from dtrlab.core import ConfigError, Dataset, FeatureMap, Trajectory
from dtrlab.indirect import (
    a_learning_fit,
    blip_regret_convert,
    fit_propensity_models,
    q_function_values,
    q_learning_fit,
    regret_to_blip,
    stage_spec,
)
from dtrlab.simlab import generate_case1
from dtrlab.stats import SingularDesignError


def case1_specs(variant):
    return [
        stage_spec("1,L1", "1,L1", "1,L1", variant),
        stage_spec("1,L2", "1,L1,A1,L1:A1,L2", "1,L2", variant),
    ]


def toy_dataset(l1, a1, l2, a2, y):
    trajs = tuple(
        Trajectory(((float(u),), (float(v),)), (int(p), int(q)), float(w))
        for u, p, v, q, w in zip(l1, a1, l2, a2, y))
    return Dataset(trajs, (("L1",), ("L2",)))


class TestQLearning:
    def test_constant_outcome_gives_zero_contrast(self):
        rng = np.random.default_rng(0)
        ds = toy_dataset(rng.normal(size=12), rng.integers(2, size=12),
                         rng.normal(size=12), rng.integers(2, size=12),
                         np.full(12, 7.0))
        specs = [stage_spec("1,L1", "1,L1", variant="q"),
                 stage_spec("1,L2", "1,L1,L2", variant="q")]
        fit = q_learning_fit(ds, specs)
        for psi in fit.psi:
            np.testing.assert_allclose(psi, 0.0, atol=1e-8)
        assert fit.values is not None
        np.testing.assert_allclose(fit.values, 7.0, atol=1e-8)

    def test_stage2_matches_normal_equation_oracle(self):
        rng = np.random.default_rng(1)
        n = 6
        l1 = rng.normal(size=n)
        a1 = rng.integers(2, size=n)
        l2 = rng.normal(size=n)
        a2 = np.array([0, 1, 0, 1, 1, 0])
        y = rng.normal(size=n)
        ds = toy_dataset(l1, a1, l2, a2, y)
        specs = [stage_spec("1,L1", "1,L1", variant="q"),
                 stage_spec("1,L2", "1,L1", variant="q")]
        fit = q_learning_fit(ds, specs)
        X = np.column_stack([a2, a2 * l2, np.ones(n), l1])
        beta = np.linalg.solve(X.T @ X, X.T @ y)
        np.testing.assert_allclose(
            np.concatenate([fit.psi[1], fit.xi[1]]), beta, atol=1e-9)

    def test_value_update_can_fall_below_outcome(self):
        ds = generate_case1(500, 7)
        fit = q_learning_fit(ds, case1_specs("q"))
        y = ds.column("Y")
        assert np.any(fit.values[:, 1] < y)

    def test_case1_value_means_band(self):
        # Reported single-draw means at n=500 were about
        # (1114.19, 1059.36, 999.01); allow wide sampling slack.
        ds = generate_case1(500, 40)
        fit = q_learning_fit(ds, case1_specs("q"))
        assert abs(fit.value_means[0] - 1114.19) < 40
        assert abs(fit.value_means[1] - 1059.36) < 40
        assert abs(float(np.mean(ds.column("Y"))) - 999.01) < 40

    def test_singular_design_is_stage_tagged(self):
        rng = np.random.default_rng(2)
        ds = toy_dataset(rng.normal(size=10), rng.integers(2, size=10),
                         np.full(10, 5.0), rng.integers(2, size=10),
                         rng.normal(size=10))
        specs = [stage_spec("1,L1", "1,L1", variant="q"),
                 stage_spec("1,L2", "1,L2", variant="q")]
        with pytest.raises(SingularDesignError, match="stage 2"):
            q_learning_fit(ds, specs)


class TestALearning:
    def test_a3_matches_hand_stacked_solve(self):
        rng = np.random.default_rng(3)
        n = 6
        l1 = rng.normal(size=n)
        a1 = np.array([1, 0, 1, 0, 1, 0])
        l2 = rng.normal(size=n)
        a2 = np.array([0, 1, 1, 0, 1, 0])
        y = rng.normal(size=n)
        ds = toy_dataset(l1, a1, l2, a2, y)
        specs = [stage_spec("1", "1", "1", "a3"),
                 stage_spec("1,L2", "1,L1", "1,L1", "a3")]
        fit = a_learning_fit(ds, specs)
        # Rebuild stage 2 by hand: logistic A2 ~ (1, L1), then the 4x4
        # stacked system in (psi, xi).
        from dtrlab.stats import clip_probabilities, logistic_fit

        P = np.column_stack([np.ones(n), l1])
        pi, _ = clip_probabilities(logistic_fit(P, a2.astype(float)).predict(P))
        R = np.column_stack([np.ones(n), l2])
        D = np.column_stack([np.ones(n), l1])
        M = np.zeros((4, 4))
        b = np.zeros(4)
        for i in range(n):
            w = a2[i] - pi[i]
            M[:2, :2] += w * a2[i] * np.outer(R[i], R[i])
            M[:2, 2:] += w * np.outer(R[i], D[i])
            M[2:, :2] += a2[i] * np.outer(D[i], R[i])
            M[2:, 2:] += np.outer(D[i], D[i])
            b[:2] += w * y[i] * R[i]
            b[2:] += y[i] * D[i]
        hand = np.linalg.solve(M, b)
        np.testing.assert_allclose(fit.psi[1], hand[:2], atol=1e-10)
        np.testing.assert_allclose(fit.xi[1], hand[2:], atol=1e-10)

    def test_a1_equals_contrast_only_stacked_solve(self):
        from dtrlab.stats import (clip_probabilities, logistic_fit,
                                  solve_joint_linear_ee)

        ds = generate_case1(200, 9)
        fit = a_learning_fit(ds, case1_specs("a1"))
        env = ds.env()
        P = np.column_stack([np.ones(200), env["L2"]])
        pi, _ = clip_probabilities(logistic_fit(P, env["A2"]).predict(P))
        ee = solve_joint_linear_ee(P, env["A2"], None, pi, env["Y"])
        np.testing.assert_allclose(fit.psi[1], ee.psi, atol=1e-10)

    def test_monotone_value_columns(self):
        ds = generate_case1(400, 11)
        for variant in ("a1", "a2", "a3", "a4", "dwols"):
            fit = a_learning_fit(ds, case1_specs(variant))
            y = ds.column("Y")
            assert np.all(fit.values[:, 0] >= fit.values[:, 1])
            assert np.all(fit.values[:, 1] >= y)

    def test_value_equals_outcome_when_rule_matches(self):
        # Wherever the fitted stage-2 rule agrees with the observed action,
        # the stage-2 value column must equal the outcome exactly.
        ds = generate_case1(500, 7)
        fit = a_learning_fit(ds, case1_specs("a3"))
        env = ds.env()
        d2 = fit.regime.rules[1].actions(env, ds.n)
        match = d2 == env["A2"]
        assert match.any()
        np.testing.assert_array_equal(fit.values[match, 1],
                                      env["Y"][match])

    def test_worked_example_magnitudes(self):
        # Stage-2 coefficients near (677.83, -1.92) up to sampling noise.
        ds = generate_case1(500, 12)
        fit = a_learning_fit(ds, case1_specs("a3"))
        assert 470 < fit.psi[1][0] < 930
        assert -2.4 < fit.psi[1][1] < -1.6
        assert abs(fit.value_means[0] - 1122.99) < 40
        assert abs(fit.value_means[1] - 1067.92) < 40

    def test_a2_a4_shift_equivariance(self):
        ds = generate_case1(300, 13)
        shifted_trajs = tuple(
            Trajectory(t.covariates, t.actions, t.outcome + 500.0)
            for t in ds.trajectories)
        shifted = Dataset(shifted_trajs, ds.stage_names)
        for variant in ("a2", "a4"):
            base = a_learning_fit(ds, case1_specs(variant))
            moved = a_learning_fit(shifted, case1_specs(variant))
            np.testing.assert_allclose(base.psi[1], moved.psi[1], atol=1e-6)

    def test_propensity_required(self):
        ds = generate_case1(100, 1)
        with pytest.raises(ConfigError, match="propensity"):
            a_learning_fit(ds, [stage_spec("1,L1", "1,L1", variant="a3"),
                                stage_spec("1,L2", "1,L2", variant="a3")])


class TestBlipRegret:
    def test_reference_examples(self):
        mu = blip_regret_convert(np.array([[0.0, 5.0]]))
        np.testing.assert_allclose(mu, [[5.0, 0.0]])
        mu = blip_regret_convert(np.array([[0.0, -3.0]]))
        np.testing.assert_allclose(mu, [[0.0, 3.0]])

    def test_round_trip_over_random_table(self):
        rng = np.random.default_rng(5)
        blip = np.zeros((10, 2))
        blip[:, 1] = rng.normal(size=10)  # reference action anchored at 0
        mu = blip_regret_convert(blip)
        assert np.all(mu >= 0)
        np.testing.assert_allclose(regret_to_blip(mu), blip, atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            blip_regret_convert(np.array([[np.nan, 1.0]]))


class TestPropensityAndQValues:
    def test_propensity_models_clip(self):
        ds = generate_case1(300, 3)
        models = fit_propensity_models(
            ds, [FeatureMap(("1", "L1")), FeatureMap(("1", "L2"))])
        env = ds.env()
        for m in models:
            p = m.predict(env, ds.n)
            assert np.all(p >= 1e-3) and np.all(p <= 1 - 1e-3)

    def test_q_function_evaluation(self):
        ds = generate_case1(300, 3)
        fit = q_learning_fit(ds, case1_specs("q"))
        env = ds.env()
        q1 = q_function_values(fit, env, ds.n, 2, np.ones(ds.n))
        q0 = q_function_values(fit, env, ds.n, 2, np.zeros(ds.n))
        contrast = env["L2"] * fit.psi[1][1] + fit.psi[1][0]
        np.testing.assert_allclose(q1 - q0, contrast, atol=1e-8)


class TestEarlyTermination:
    def _dataset(self):
        rng = np.random.default_rng(8)
        trajs = []
        for i in range(60):
            l1 = float(rng.normal())
            a1 = int(rng.integers(2))
            if i % 3 == 0:  # stops after stage 1
                trajs.append(Trajectory(((l1,),), (a1,),
                                        float(rng.normal() + a1)))
            else:
                l2 = float(rng.normal() + l1)
                a2 = int(rng.integers(2))
                trajs.append(Trajectory(((l1,), (l2,)), (a1, a2),
                                        float(rng.normal() + a1 - a2 * l2)))
        return Dataset(tuple(trajs), (("L1",), ("L2",)))

    def test_q_learning_keeps_terminal_outcomes(self):
        ds = self._dataset()
        specs = [stage_spec("1,L1", "1,L1", "1,L1", "q"),
                 stage_spec("1,L2", "1,L1,L2", "1,L2", "q")]
        fit = q_learning_fit(ds, specs)
        stopped = ds.terminal_stages == 1
        np.testing.assert_array_equal(fit.values[stopped, 1],
                                      ds.column("Y")[stopped])

    def test_a_learning_monotone_with_prefixes(self):
        ds = self._dataset()
        specs = [stage_spec("1,L1", "1,L1", "1,L1", "a3"),
                 stage_spec("1,L2", "1,L1,L2", "1,L2", "a3")]
        fit = a_learning_fit(ds, specs)
        y = ds.column("Y")
        assert np.all(fit.values[:, 0] >= fit.values[:, 1])
        assert np.all(fit.values[:, 1] >= y)
