"""
评估服务测试: 指标与消融
"""
import numpy as np
import pytest

from services.evaluation_service import (
    AblationMode, ablation_policy, auprc, auroc, build_policy, multiclass_metrics, pooled_metrics,
    pooled_predictions,
)
from services.inference_service import infer_dataset
from utils.errors import ConfigurationError, InputError

SCORES = [0.1, 0.4, 0.35, 0.8]
LABELS = [0, 0, 1, 1]


class TestBinaryMetrics:

    def test_auroc_example(self):
        assert auroc(SCORES, LABELS) == pytest.approx(0.75)

    def test_auprc_example(self):
        assert auprc(SCORES, LABELS) == pytest.approx(0.8333, abs=1e-4)

    def test_ties_count_half(self):
        assert auroc([0.5, 0.5, 0.5, 0.5], LABELS) == pytest.approx(0.5)

    def test_perfect_ranking(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], LABELS) == 1.0
        assert auprc([0.1, 0.2, 0.8, 0.9], LABELS) == 1.0

    def test_single_class_undefined(self):
        assert auroc([0.1, 0.9], [1, 1]) is None
        assert auprc([0.1, 0.9], [0, 0]) is None


class TestMulticlass:

    def test_two_classes_match_binary(self):
        probs = np.column_stack([1 - np.array(SCORES), SCORES])
        roc, pr = multiclass_metrics(probs, LABELS)
        assert roc == pytest.approx(auroc(SCORES, LABELS))
        assert pr == pytest.approx(auprc(SCORES, LABELS))

    def test_macro_average(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(3), size=60)
        labels = rng.integers(0, 3, size=60)
        roc, _ = multiclass_metrics(probs, labels)
        expected = np.mean([auroc(probs[:, c], (labels == c).astype(int)) for c in range(3)])
        assert roc == pytest.approx(expected)

    def test_absent_class_skipped(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.8, 0.1]])
        labels = [0, 1, 0, 1]
        roc, pr = multiclass_metrics(probs, labels)
        assert roc == pytest.approx(1.0)
        assert pr == pytest.approx(1.0)

    def test_shape_checks(self):
        with pytest.raises(InputError):
            multiclass_metrics(np.ones((3, 2)), [0, 1])
        with pytest.raises(InputError):
            multiclass_metrics(np.ones(3), [0, 1, 0])


class TestPooledMetrics:

    def test_pools_every_step(self, tiny_models, tiny_instances, tiny_manifest):
        records, _ = infer_dataset(tiny_models, tiny_instances, tiny_manifest.cost_spec())
        probs, labels = pooled_predictions(records, tiny_instances)
        assert probs.shape == (8 * 3, 2)
        np.testing.assert_array_equal(labels[:3], tiny_instances[0].labels)
        np.testing.assert_array_equal(probs[3:6], records[1].prediction_matrix())
        np.testing.assert_array_equal(labels[3:6], tiny_instances[1].labels)

    def test_unknown_instance(self, tiny_models, tiny_instances, tiny_manifest):
        records, _ = infer_dataset(tiny_models, tiny_instances[:2], tiny_manifest.cost_spec())
        with pytest.raises(InputError):
            pooled_predictions(records, tiny_instances[2:])

    def test_empty(self, tiny_instances):
        assert pooled_metrics([], tiny_instances) == (None, None)


class TestAblations:

    def test_context_overrides(self, tiny_models, tiny_instances, tiny_manifest):
        costs = tiny_manifest.cost_spec()
        none = ablation_policy(AblationMode.REACT_NONE, tiny_models, tiny_instances, costs)
        full = ablation_policy(AblationMode.REACT_ALL, tiny_models, tiny_instances, costs)
        assert all(r.context_cost == 0.0 for r in none.records)
        assert all(r.context_cost == pytest.approx(1.5) for r in full.records)
        assert none.summary.mean_context_cost == 0.0

    def test_acquire_all_and_none(self, tiny_models, tiny_instances, tiny_manifest):
        costs = tiny_manifest.cost_spec()
        everything = ablation_policy("acquire_all", tiny_models, tiny_instances, costs)
        nothing = ablation_policy("acquire_none", tiny_models, tiny_instances, costs)
        assert everything.summary.mean_total_cost == pytest.approx(1.5 + 9.0)
        assert nothing.summary.mean_total_cost == 0.0

    def test_random_rate_mean_cost(self, tiny_models, tiny_manifest, make_instances):
        instances = make_instances(tiny_manifest, 400, seed=7)
        result = ablation_policy(AblationMode.RANDOM_RATE, tiny_models, instances, tiny_manifest.cost_spec(),
                                 rate=0.5, seed=3)
        assert abs(result.summary.mean_temporal_cost - 0.5 * 3 * 3.0) < 0.4

    def test_missing_parameters(self):
        with pytest.raises(ConfigurationError):
            build_policy(AblationMode.RANDOM_RATE, 2)
        with pytest.raises(ConfigurationError):
            build_policy(AblationMode.FIXED_INTERVAL, 2)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            build_policy("sometimes", 2)
