"""
目标函数测试: 成本、掩码算子、松弛损失及其梯度、插值目标
"""
import numpy as np
import pytest

from services.model_service import predict
from services.objective_service import (
    MaskState, keep_after, keep_upto, plugin_objective, plugin_objective_batch, react_loss, react_loss_batch,
    total_cost,
)
from storage.models import CostSpec, Instance
from utils.errors import InputError
from utils.gating import GateMode
from utils.nn_core import finite_difference_check


def _zero(params):
    for p in params:
        p.values[...] = 0.0


class TestTotalCost:

    def test_adni_shaped_example(self):
        costs = CostSpec(c_s=np.full(7, 0.3), c_x=np.array([1.0, 1.0, 0.5, 0.5]))
        masks = np.zeros((12, 4))
        masks[2] = [1, 0, 1, 0]
        masks[5] = [1, 0, 1, 0]
        assert total_cost(np.ones(7), masks, costs) == pytest.approx(5.1)

    def test_empty_plan(self):
        costs = CostSpec(c_s=np.array([1.0, 2.0]), c_x=np.array([3.0]))
        assert total_cost(np.zeros(2), np.zeros((4, 1)), costs) == 0.0

    def test_monotone_in_mask(self):
        rng = np.random.default_rng(0)
        costs = CostSpec(c_s=rng.uniform(0.1, 1, 3), c_x=rng.uniform(0.1, 1, 2))
        small = (rng.random((5, 2)) > 0.5).astype(float)
        large = np.maximum(small, (rng.random((5, 2)) > 0.5).astype(float))
        assert total_cost(np.zeros(3), small, costs) <= total_cost(np.zeros(3), large, costs)

    def test_length_mismatch(self):
        costs = CostSpec(c_s=np.ones(2), c_x=np.ones(2))
        with pytest.raises(InputError):
            total_cost(np.ones(3), np.zeros((2, 2)), costs)


class TestMaskOperators:

    @pytest.mark.parametrize("t", [0, 1, 2, 3, 4])
    def test_complementary(self, t):
        v = np.random.default_rng(t).normal(size=(4, 3))
        np.testing.assert_array_equal(keep_after(v, t) + keep_upto(v, t), v)

    def test_boundaries(self):
        v = np.arange(12.0).reshape(4, 3)
        np.testing.assert_array_equal(keep_after(v, 0), v)
        np.testing.assert_array_equal(keep_upto(v, 4), v)
        np.testing.assert_array_equal(keep_after(v, 4), 0.0)
        np.testing.assert_array_equal(keep_upto(v, 0), 0.0)

    def test_rows(self):
        v = np.ones((3, 2))
        np.testing.assert_array_equal(keep_after(v, 1), [[0, 0], [1, 1], [1, 1]])
        np.testing.assert_array_equal(keep_upto(v, 1), [[1, 1], [0, 0], [0, 0]])

    def test_input_not_modified(self):
        v = np.ones((3, 2))
        keep_after(v, 2)
        np.testing.assert_array_equal(v, 1.0)

    def test_out_of_range(self):
        with pytest.raises(InputError):
            keep_after(np.ones((3, 2)), 4)


class TestMaskState:

    def test_valid(self):
        MaskState(np.array([[1, 0], [0, 0], [0, 0]]), 1).validate(3, 2)

    def test_rows_after_t_rejected(self):
        with pytest.raises(InputError):
            MaskState(np.array([[1, 0], [0, 1], [0, 0]]), 1).validate(3, 2)

    def test_non_binary_rejected(self):
        with pytest.raises(InputError):
            MaskState(np.array([[0.5, 0], [0, 0], [0, 0]]), 1).validate(3, 2)

    @pytest.mark.parametrize("t", [-1, 4])
    def test_step_out_of_range(self, t):
        with pytest.raises(InputError):
            MaskState(np.zeros((3, 2)), t).validate(3, 2)

    def test_shape(self):
        with pytest.raises(InputError):
            MaskState(np.zeros((2, 2)), 0).validate(3, 2)


class TestReactLoss:

    def test_zero_lambda_is_prediction_only(self, tiny_models, tiny_instances, tiny_manifest):
        _, breakdown = react_loss(tiny_models, tiny_instances[0], MaskState(np.zeros((3, 2)), 0),
                                  0.0, 1.0, np.random.default_rng(0), costs=tiny_manifest.cost_spec())
        np.testing.assert_allclose(breakdown.per_item, breakdown.prediction_loss)

    def test_final_state_is_cost_only(self, tiny_models, tiny_instances, tiny_manifest):
        tiny_models.selector.alpha.values[...] = [3.0, 3.0]
        grid = np.array([[1, 0], [0, 1], [1, 1]], dtype=float)
        loss, breakdown = react_loss(tiny_models, tiny_instances[0], MaskState(grid, 3), 0.5, 1.0, None,
                                     mode=GateMode.DETERMINISTIC, costs=tiny_manifest.cost_spec())
        assert breakdown.prediction_loss[0] == 0.0
        assert breakdown.temporal_cost[0] == 0.0
        assert loss == pytest.approx(0.5 * 1.5)

    def test_zero_networks_hand_value(self, tiny_models, tiny_instances, tiny_manifest):
        _zero(tiny_models.planner.params)
        _zero(tiny_models.predictor.params)
        loss, _ = react_loss(tiny_models, tiny_instances[0], MaskState(np.zeros((3, 2)), 0), 2.0, 1.0, None,
                             mode=GateMode.DETERMINISTIC, costs=tiny_manifest.cost_spec())
        # σ(0) = 0.5 不大于阈值: 不获取任何特征，三个目标均为均匀预测
        assert loss == pytest.approx(3 * np.log(2))

    def test_context_cost_gradient(self, tiny_models, tiny_instances, tiny_manifest):
        _zero(tiny_models.planner.params)
        _zero(tiny_models.predictor.params)
        tiny_models.zero_grad()
        react_loss(tiny_models, tiny_instances[0], MaskState(np.zeros((3, 2)), 0), 2.0, 1.0, None,
                   mode=GateMode.DETERMINISTIC, costs=tiny_manifest.cost_spec())
        # 预测器与规划器的输入梯度为零，只剩 λ·c_s·σ'(α)/τ
        np.testing.assert_allclose(tiny_models.selector.alpha.grad, 2.0 * np.array([1.0, 0.5]) * 0.25)

    def test_temporal_cost_gradient_only_on_future_rows(self, tiny_models, tiny_instances, tiny_manifest):
        _zero(tiny_models.predictor.params)
        tiny_models.zero_grad()
        M_prev = np.array([[1, 1], [0, 0], [0, 0]], dtype=float)
        react_loss(tiny_models, tiny_instances[0], MaskState(M_prev, 1), 1.0, 1.0, None,
                   mode=GateMode.DETERMINISTIC, costs=tiny_manifest.cost_spec())
        last_bias = tiny_models.planner.params[-1]
        logits = last_bias.grad.reshape(3, 2)
        np.testing.assert_array_equal(logits[0], 0.0)
        assert np.all(logits[1:] > 0)

    def test_batch_matches_single_items(self, tiny_models, tiny_instances, tiny_manifest):
        states = [MaskState(np.zeros((3, 2)), 0), MaskState(np.array([[1, 0], [0, 0], [0, 0]]), 1),
                  MaskState(np.array([[0, 1], [1, 1], [0, 0]]), 2)]
        items = list(zip(tiny_instances[:3], states))
        batch = react_loss_batch(tiny_models, items, 0.3, 0.7, np.random.default_rng(4),
                                 costs=tiny_manifest.cost_spec(), accumulate=False)
        rng = np.random.default_rng(4)
        singles = [react_loss(tiny_models, inst, st, 0.3, 0.7, rng, costs=tiny_manifest.cost_spec())[0]
                   for inst, st in items]
        np.testing.assert_allclose(batch.per_item, singles, rtol=1e-12)

    def test_prediction_terms_read_only_past_rows(self, tiny_models, tiny_instances, tiny_manifest,
                                                  constant_planner):
        constant_planner(tiny_models, 50.0)
        tiny_models.selector.alpha.values[...] = [5.0, -5.0]
        original = tiny_instances[0]
        future = np.array(original.temporal, copy=True)
        future[2] = [40.0, -40.0]
        altered = Instance(id=original.id, context=original.context, temporal=future, labels=original.labels)
        M_prev = np.array([[1, 0], [0, 0], [0, 0]], dtype=float)
        M_full = M_prev + keep_after(np.ones((3, 2)), 1)

        def terms(instance):
            s_tilde = np.array([1.0, 0.0]) * instance.context
            values = {}
            for t_prime in (2, 3):
                history = keep_upto(M_full * instance.temporal, t_prime)
                probs = predict(tiny_models.predictor, history, s_tilde, t_prime)
                values[t_prime] = -np.log(probs[instance.labels[t_prime - 1]])
            return values

        for instance in (original, altered):
            _, breakdown = react_loss(tiny_models, instance, MaskState(M_prev, 1), 0.0, 1.0, None,
                                      mode=GateMode.DETERMINISTIC, costs=tiny_manifest.cost_spec())
            assert breakdown.prediction_loss[0] == pytest.approx(sum(terms(instance).values()), rel=1e-10)

        # 第3行只影响 t'=3 的预测项
        assert terms(original)[2] == terms(altered)[2]
        assert terms(original)[3] != terms(altered)[3]

    def test_negative_lambda(self, tiny_models, tiny_instances):
        with pytest.raises(InputError):
            react_loss(tiny_models, tiny_instances[0], MaskState(np.zeros((3, 2)), 0), -1.0, 1.0,
                       np.random.default_rng(0))

    def test_relaxed_gradient_matches_finite_differences(self, tiny_models, tiny_instances, tiny_manifest):
        items = [(tiny_instances[0], MaskState(np.zeros((3, 2)), 0)),
                 (tiny_instances[1], MaskState(np.array([[1, 0], [0, 0], [0, 0]]), 1))]

        def loss_fn(_):
            breakdown = react_loss_batch(tiny_models, items, 0.3, 1.0, np.random.default_rng(11),
                                         mode=GateMode.RELAXED, costs=tiny_manifest.cost_spec())
            return breakdown.total

        assert finite_difference_check(loss_fn, tiny_models.all_params) < 1e-4


class TestPluginObjective:

    def test_matches_direct_prediction(self, make_manifest, make_models):
        manifest = make_manifest(d_s=1, d=1, T=2, C=2, context_costs=[0.7], temporal_costs=[0.4])
        models = make_models(manifest, seed=5)
        instance = Instance(id="a", context=np.array([1.3]), temporal=np.array([[0.5], [-2.0]]),
                            labels=np.array([1, 0]))
        m_s = np.array([1.0])
        M = np.array([[1.0], [1.0]])
        lam = 0.25

        masked = M * instance.temporal
        expected = 0.0
        for t_prime in (1, 2):
            history = keep_upto(masked, t_prime)
            probs = predict(models.predictor, history, m_s * instance.context, t_prime)
            expected -= np.log(probs[instance.labels[t_prime - 1]])
        expected += lam * (0.7 + 2 * 0.4)

        value = plugin_objective(m_s, M, instance, models.predictor, lam, manifest.cost_spec())
        assert value == pytest.approx(expected, rel=1e-10)

    def test_batch_cost_column(self, tiny_models, tiny_instances, tiny_manifest):
        m_s = np.array([[0, 0], [1, 1]], dtype=float)
        M = np.stack([np.zeros((3, 2)), np.ones((3, 2))])
        scores, cost = plugin_objective_batch(m_s, M, tiny_instances[0], tiny_models.predictor, 1.0,
                                              tiny_manifest.cost_spec())
        np.testing.assert_allclose(cost, [0.0, 1.5 + 3 * 3.0])
        assert scores.shape == (2,)

    def test_batch_agrees_with_single(self, tiny_models, tiny_instances, tiny_manifest):
        rng = np.random.default_rng(0)
        m_s = (rng.random((4, 2)) > 0.5).astype(float)
        M = (rng.random((4, 3, 2)) > 0.5).astype(float)
        scores, _ = plugin_objective_batch(m_s, M, tiny_instances[2], tiny_models.predictor, 0.2,
                                           tiny_manifest.cost_spec())
        for k in range(4):
            single = plugin_objective(m_s[k], M[k], tiny_instances[2], tiny_models.predictor, 0.2,
                                      tiny_manifest.cost_spec())
            assert scores[k] == pytest.approx(single, rel=1e-12)
