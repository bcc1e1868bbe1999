import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradbalance.dynamics import (DynamicsParams, alpha_beta, delta_logit, epoch_dynamics, epoch_weights,
                                  one_step_gradient_oracle, prob_update_balanced, prob_update_dpo)
from gradbalance.losses import LossKind, LossSpec
from gradbalance.policy import PolicyTable, ReferencePolicy
from gradbalance.task import GaussianScenario, PairSample, PreferenceTask, sample_pair_arrays


def random_task(rng, m=None, n_x=1):
    m = m or int(rng.integers(3, 15))
    return PreferenceTask(rng.lognormal(0.0, 1.0, (n_x, m))), PolicyTable(rng.normal(0.0, 1.0, (n_x, m)))


class TestParams:
    def test_gamma(self):
        assert DynamicsParams(eta=0.3, g=2.0).gamma == pytest.approx(1.2, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            DynamicsParams(eta=0.0)
        with pytest.raises(ValueError):
            DynamicsParams(lambda_corr=1.0)


class TestDeltaLogit:
    def test_fully_learned_pair_does_not_move(self):
        assert delta_logit(PairSample(0, 0, 1, 1), 1.0, DynamicsParams()) == (0.0, -0.0)

    def test_dpo_value(self):
        dw, dl = delta_logit(PairSample(0, 0, 1, 1), 0.5, DynamicsParams(eta=0.1))
        assert dw == pytest.approx(0.05) and dl == pytest.approx(-0.05)

    def test_balanced_equal_probabilities(self):
        params = DynamicsParams(eta=0.1)
        bw, bl = delta_logit(PairSample(0, 0, 1, 1), 0.5, params, balanced=True, p1=0.2, p2=0.2)
        assert bw == pytest.approx(-bl)
        assert bw == pytest.approx(0.05 * 0.2)

    def test_correlation_shrinks_dpo(self):
        plain = delta_logit(PairSample(0, 0, 1, -1), 0.3, DynamicsParams(eta=0.2))
        corr = delta_logit(PairSample(0, 0, 1, -1), 0.3, DynamicsParams(eta=0.2, lambda_corr=0.25))
        assert corr[0] == pytest.approx(0.75 * plain[0])

    def test_balanced_needs_probabilities(self):
        with pytest.raises(ValueError):
            delta_logit(PairSample(0, 0, 1, 1), 0.5, DynamicsParams(), balanced=True)


class TestEpochWeights:
    def test_two_response_value(self):
        task = PreferenceTask(np.array([[1.0, math.e]]))
        w = epoch_weights(np.array([[0.5, 0.5]]), task)
        assert w[0, 0] == pytest.approx(1 / (1 + math.e) - 0.5)
        assert w[0, 0] == pytest.approx(-0.2311, abs=1e-4)

    def test_equals_beta_minus_alpha(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            task, pol = random_task(rng, n_x=2)
            a, b = alpha_beta(pol, task)
            assert np.abs(epoch_weights(pol, task) - (b - a)).max() < 1e-9

    def test_fixed_point_when_policy_matches_utility(self):
        task = PreferenceTask(np.array([[1.0, 2.0, 5.0, 0.5]]))
        p = task.utility / task.utility.sum()
        np.testing.assert_allclose(epoch_weights(p, task), 0.0, atol=1e-12)

    def test_sampled_converges_to_expected(self):
        rng = np.random.default_rng(1)
        task, pol = random_task(rng, m=6)
        data = sample_pair_arrays(task, None, 100_000, rng)
        np.testing.assert_allclose(epoch_weights(pol, task, data), epoch_weights(pol, task), atol=0.02)

    def test_masked_cells_get_nothing(self):
        task = PreferenceTask(np.ones((1, 4)) + np.arange(4), mask=[[False, True, False, False]])
        assert epoch_weights(np.full((1, 4), 0.25), task)[0, 1] == 0.0


class TestAlphaBeta:
    def test_uniform_alpha(self):
        task = PreferenceTask(np.random.default_rng(2).lognormal(size=(1, 7)))
        a, _ = alpha_beta(np.full((1, 7), 1 / 7), task)
        np.testing.assert_allclose(a, 3.0)

    def test_gaussian_scenario_cross_check(self):
        sc = GaussianScenario(45, 55, 100, 100)
        logp = sc.log_model()
        p = np.exp(logp - logp.max())
        p /= p.sum()
        task = sc.to_task()
        a, b = alpha_beta(p[None], task)
        assert np.abs(epoch_weights(p[None], task) - (b - a)).max() < 1e-9


class TestProbUpdates:
    def test_constant_w_dpo_zero(self):
        p = np.array([[0.1, 0.2, 0.7]])
        np.testing.assert_allclose(prob_update_dpo(p, np.full((1, 3), 2.0), DynamicsParams()), 0.0, atol=1e-15)

    def test_dpo_value(self):
        dp = prob_update_dpo(np.array([[0.5, 0.5]]), np.array([[1.0, -1.0]]), DynamicsParams(eta=0.1))
        np.testing.assert_allclose(dp, [[0.05, -0.05]])

    def test_constant_w_balanced_nonzero(self):
        p = np.array([[0.1, 0.2, 0.7]])
        dp = prob_update_balanced(p, np.full((1, 3), 2.0), DynamicsParams())
        np.testing.assert_allclose(dp, 2.0 * p * (p - (p * p).sum()))
        assert np.abs(dp).max() > 0

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_conservation(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(8))[None]
        w = rng.normal(size=(1, 8))
        params = DynamicsParams(eta=0.7)
        assert abs(prob_update_dpo(p, w, params).sum()) < 1e-9
        assert abs(prob_update_balanced(p, w, params).sum()) < 1e-9

    def test_zero_probability_absorbing(self):
        p = np.array([[0.0, 0.3, 0.7]])
        w = np.array([[5.0, -1.0, 0.2]])
        assert prob_update_dpo(p, w, DynamicsParams())[0, 0] == 0.0
        assert prob_update_balanced(p, w, DynamicsParams())[0, 0] == 0.0


class TestOneStepOracle:
    def test_matches_closed_form_dpo(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            task, pol = random_task(rng, m=10)
            closed = prob_update_dpo(pol, epoch_weights(pol, task), DynamicsParams(eta=1e-4))
            real = one_step_gradient_oracle(pol, task, LossSpec(), 1e-4)
            assert np.abs(closed - real).max() / np.abs(real).max() < 0.01

    def test_first_order_consistency(self):
        rng = np.random.default_rng(4)
        task, pol = random_task(rng, m=10)

        def gap(eta):
            closed = prob_update_dpo(pol, epoch_weights(pol, task), DynamicsParams(eta=eta))
            return np.abs(closed - one_step_gradient_oracle(pol, task, LossSpec(), eta)).max()

        assert gap(5e-5) <= 0.6 * gap(1e-4)

    def test_balanced_rule_small_probability_regime(self):
        rng = np.random.default_rng(5)
        m = 200
        task = PreferenceTask(rng.lognormal(0.0, 1.0, (1, m)))
        pol = PolicyTable(rng.normal(0.0, 0.3, (1, m)))
        assert pol.probs().max() <= 0.05
        eta = 1e-3
        closed = prob_update_balanced(pol, epoch_weights(pol, task), DynamicsParams(eta=eta))
        real = one_step_gradient_oracle(pol, task, LossSpec(LossKind.BALANCED_REFERENCE), eta)
        assert np.abs(closed - real).max() / np.abs(real).max() < 0.05

    def test_uniform_reference_default(self):
        rng = np.random.default_rng(6)
        task, pol = random_task(rng, m=5)
        a = one_step_gradient_oracle(pol, task, LossSpec(), 1e-3)
        b = one_step_gradient_oracle(pol, task, LossSpec(), 1e-3, ReferencePolicy.uniform((1, 5)))
        np.testing.assert_allclose(a, b, atol=1e-15)


class TestEpochDynamics:
    def test_bundle_and_csv(self, tmp_path):
        rng = np.random.default_rng(7)
        task, pol = random_task(rng, m=6)
        dyn = epoch_dynamics(pol, task, DynamicsParams(eta=0.1))
        np.testing.assert_allclose(dyn.w, dyn.beta_vec - dyn.alpha, atol=1e-9)
        assert dyn.max_prob == pytest.approx(pol.probs().max())
        path = tmp_path / "dyn.csv"
        dyn.write_csv(path, task)
        lines = path.read_text().splitlines()
        assert lines[0] == "y,p,u,alpha,beta,w,dp_dpo,dp_balanced"
        assert len(lines) == 7
