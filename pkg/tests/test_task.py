import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradbalance.task import (GaussianScenario, PairSample, PreferenceTask, SamplingScheme, TaskError,
                              apply_mask, expected_pair_dataset, gaussian_utility, preference_probability,
                              sample_pair_arrays, sample_pairs)


class TestGaussianUtility:
    def test_zero_distance_is_one(self):
        assert gaussian_utility(5, 5, 0.6) == 1.0

    def test_unit_distance(self):
        assert gaussian_utility(5, 6, 0.6) == pytest.approx(math.exp(-0.6))
        assert gaussian_utility(5, 6, 0.6) == pytest.approx(0.5488, abs=1e-4)

    def test_symmetric_in_distance(self):
        assert gaussian_utility(3, 7, 0.6) == gaussian_utility(7, 3, 0.6)

    def test_rejects_non_positive_alpha(self):
        with pytest.raises(ValueError):
            gaussian_utility(1, 2, 0.0)

    @given(st.integers(1, 20), st.integers(0, 19))
    def test_peak_at_prompt_and_decreasing(self, x, d):
        assert gaussian_utility(x, x + d + 1, 0.6) < gaussian_utility(x, x + d, 0.6)


class TestPreferenceTask:
    def test_grid_optimum_on_diagonal(self):
        task = PreferenceTask.gaussian_grid()
        assert task.utility.shape == (20, 20)
        np.testing.assert_array_equal(task.utility.argmax(axis=1), np.arange(20))

    def test_rejects_nonpositive_utility(self):
        with pytest.raises(TaskError):
            PreferenceTask(np.array([[1.0, 0.0]]))

    def test_rejects_single_response(self):
        with pytest.raises(TaskError):
            PreferenceTask(np.ones((2, 1)))

    def test_rejects_row_with_one_unmasked(self):
        with pytest.raises(TaskError):
            PreferenceTask(np.ones((1, 3)), mask=[[True, True, False]])

    def test_is_read_only(self):
        task = PreferenceTask.gaussian_grid(3, 4)
        with pytest.raises(ValueError):
            task.utility[0, 0] = 5.0

    def test_json_roundtrip(self, tmp_path):
        task = apply_mask(PreferenceTask.gaussian_grid(5, 6), 0.2, 3)
        path = tmp_path / "task.json"
        task.save(path)
        back = PreferenceTask.load(path)
        np.testing.assert_array_equal(back.mask, task.mask)
        np.testing.assert_array_equal(back.utility, task.utility)

    def test_json_needs_alpha(self):
        with pytest.raises(TaskError):
            PreferenceTask(np.ones((1, 3))).to_json()


class TestPreferenceProbability:
    def test_equal_utilities(self):
        assert preference_probability(PreferenceTask(np.ones((1, 3))), 0, 0, 2) == 0.5

    def test_adjacent_responses(self):
        task = PreferenceTask.gaussian_grid(10, 10)
        # labels are 1-based, so prompt 5 / responses 5, 6 are indices 4, 4, 5
        assert preference_probability(task, 4, 4, 5) == pytest.approx(1 / (1 + math.exp(-0.6)))
        assert preference_probability(task, 4, 4, 5) == pytest.approx(0.6457, abs=1e-4)

    def test_complementary(self):
        task = PreferenceTask.gaussian_grid(4, 6)
        assert preference_probability(task, 1, 2, 5) + preference_probability(task, 1, 5, 2) == pytest.approx(1.0)

    def test_masked_and_degenerate_pairs(self):
        task = PreferenceTask(np.ones((1, 4)), mask=[[True, False, False, False]])
        with pytest.raises(TaskError):
            preference_probability(task, 0, 0, 1)
        with pytest.raises(TaskError):
            preference_probability(task, 0, 2, 2)

    def test_pair_sample_validates(self):
        with pytest.raises(TaskError):
            PairSample(0, 1, 1, 1)
        with pytest.raises(TaskError):
            PairSample(0, 1, 2, 0)


class TestSampling:
    def test_uniform_pair_frequencies(self):
        task = PreferenceTask(np.array([[1.0, 2.0, 3.0]]))
        data = sample_pair_arrays(task, None, 100_000, np.random.default_rng(0))
        keys = np.minimum(data.y1, data.y2) * 3 + np.maximum(data.y1, data.y2)
        _, counts = np.unique(keys, return_counts=True)
        np.testing.assert_allclose(counts / len(keys), 1 / 3, atol=0.01)

    def test_label_frequency_matches_bradley_terry(self):
        task = PreferenceTask(np.array([[1.0, 3.0]]))
        data = sample_pair_arrays(task, None, 100_000, np.random.default_rng(1))
        p = preference_probability(task, 0, 0, 1)
        n = len(data)
        freq = np.mean(data.tau == 1)
        assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / n)

    def test_deterministic(self):
        task = PreferenceTask.gaussian_grid(3, 5)
        assert sample_pairs(task, None, 50, 9) == sample_pairs(task, None, 50, 9)

    def test_shiftless_under_uniform_policy_matches_uniform(self):
        task = PreferenceTask(np.array([[1.0, 2.0, 3.0]]))
        scheme = SamplingScheme.shiftless(np.full((1, 3), 1 / 3))
        data = sample_pair_arrays(task, scheme, 60_000, np.random.default_rng(2))
        keys = np.minimum(data.y1, data.y2) * 3 + np.maximum(data.y1, data.y2)
        _, counts = np.unique(keys, return_counts=True)
        np.testing.assert_allclose(counts / len(keys), 1 / 3, atol=0.01)

    def test_shiftless_needs_probs(self):
        from gradbalance.task import SamplingKind
        with pytest.raises(TaskError):
            SamplingScheme(SamplingKind.SHIFTLESS)

    def test_never_samples_masked_cells(self):
        task = apply_mask(PreferenceTask.gaussian_grid(), 0.4, 0)
        data = sample_pair_arrays(task, None, 100_000, np.random.default_rng(3))
        assert not task.mask[data.x, data.y1].any()
        assert not task.mask[data.x, data.y2].any()

    def test_rejects_empty_request(self):
        with pytest.raises(TaskError):
            sample_pair_arrays(PreferenceTask(np.ones((1, 2))), None, 0, np.random.default_rng(0))


class TestExpectedDataset:
    def test_two_equal_responses(self):
        data = expected_pair_dataset(PreferenceTask(np.ones((1, 2))))
        assert len(data) == 2
        np.testing.assert_allclose(data.weight, [0.5, 0.5])

    def test_ordered_weights_sum_to_one_per_pair(self):
        task = PreferenceTask.gaussian_grid(3, 5)
        data = expected_pair_dataset(task)
        half = len(data) // 2
        np.testing.assert_allclose(data.weight[:half] + data.weight[half:], 1.0)


class TestMasking:
    def test_zero_rate_unchanged(self):
        task = PreferenceTask.gaussian_grid()
        assert not apply_mask(task, 0.0, 0).mask.any()

    def test_rate_02_on_grid(self):
        task = apply_mask(PreferenceTask.gaussian_grid(), 0.2, 5)
        assert task.mask.sum() == 80
        assert ((~task.mask).sum(axis=1) >= 2).all()

    def test_deterministic(self):
        base = PreferenceTask.gaussian_grid()
        np.testing.assert_array_equal(apply_mask(base, 0.4, 1).mask, apply_mask(base, 0.4, 1).mask)

    def test_rate_one_rejected(self):
        with pytest.raises(TaskError):
            apply_mask(PreferenceTask.gaussian_grid(), 1.0, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.0, 0.95), st.integers(0, 2**16), st.integers(2, 6), st.integers(2, 8))
    def test_rows_keep_two_responses(self, rate, seed, n_x, n_y):
        task = apply_mask(PreferenceTask.gaussian_grid(n_x, n_y), rate, seed)
        assert ((~task.mask).sum(axis=1) >= 2).all()


class TestGaussianScenario:
    def test_utility_is_gaussian_up_to_constant(self):
        sc = GaussianScenario(45, 55, 100, 100)
        logu = sc.to_task().log_utility[0]
        expected = -((np.arange(100) - 55.0) ** 2) / 200.0
        np.testing.assert_allclose(logu - logu.max(), expected - expected.max(), atol=1e-9)

    def test_validation(self):
        with pytest.raises(TaskError):
            GaussianScenario(0, 1, 0.0, 10)
        with pytest.raises(TaskError):
            GaussianScenario(0, 1, 1.0, 1)
