"""
推理服务
确定性的推理期获取: 阈值化背景获取，按需获取并重新规划，逐时间步预测，完整轨迹记录
"""
from typing import List, Optional, Sequence, Tuple
import logging

import numpy as np

from services.model_service import ReactModels, context_mask, planner_logits, predict
from services.objective_service import keep_after
from storage.models import CostSpec, InferenceSummary, Instance, StepRecord, TrajectoryRecord
from utils.errors import CheckpointError, ConfigurationError
from utils.gating import GateMode

logger = logging.getLogger(__name__)


class AcquisitionPolicy:
    """获取策略基类: 决定背景掩码与未来时间计划"""

    name = "base"

    def start(self, models: ReactModels, instance: Instance):
        """每个实例开始前调用"""

    def context_mask(self, models: ReactModels) -> np.ndarray:
        raise NotImplementedError

    def plan(self, models: ReactModels, history: np.ndarray, t: int, context_masked: np.ndarray) -> np.ndarray:
        """返回 T×d 二值计划 (调用方施加 keep_after)"""
        raise NotImplementedError


class ReactPolicy(AcquisitionPolicy):
    """学习到的策略: σ(α) > 0.5 选择背景，规划器输出阈值化为计划"""

    name = "react"

    def __init__(self, forced_context: Optional[np.ndarray] = None):
        self.forced_context = None if forced_context is None else np.asarray(forced_context, dtype=np.float64)

    def context_mask(self, models: ReactModels) -> np.ndarray:
        if self.forced_context is not None:
            return self.forced_context.copy()
        return context_mask(models.selector, GateMode.DETERMINISTIC).mask

    def plan(self, models, history, t, context_masked):
        logits = planner_logits(models.planner, history, t, context_masked)
        return (logits > 0.0).astype(np.float64)


class RandomRatePolicy(ReactPolicy):
    """随机基线: 每个实例抽取一张 Bernoulli(r) 网格并保持不变"""

    name = "random_rate"

    def __init__(self, rate: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= rate <= 1.0:
            raise ConfigurationError(f"随机获取率必须位于 [0, 1], 实际为 {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)
        self._grid = None

    def start(self, models, instance):
        shape = (models.planner.T, models.planner.d)
        self._grid = (self.rng.random(shape) < self.rate).astype(np.float64)

    def plan(self, models, history, t, context_masked):
        return self._grid.copy()


class FixedIntervalPolicy(ReactPolicy):
    """固定间隔基线: 在 t = 1, 1+k, 1+2k, ... 获取全部特征"""

    name = "fixed_interval"

    def __init__(self, interval: int):
        super().__init__()
        if interval < 1:
            raise ConfigurationError(f"间隔 k 必须 ≥ 1, 实际为 {interval}")
        self.interval = interval

    def plan(self, models, history, t, context_masked):
        T, d = models.planner.T, models.planner.d
        grid = np.zeros((T, d))
        grid[:: self.interval] = 1.0
        return grid


class AcquireAllPolicy(AcquisitionPolicy):
    """全部获取 (性能上限参考)"""

    name = "acquire_all"

    def context_mask(self, models):
        return np.ones(models.selector.d_s)

    def plan(self, models, history, t, context_masked):
        return np.ones((models.planner.T, models.planner.d))


class AcquireNonePolicy(AcquisitionPolicy):
    """不获取任何特征"""

    name = "acquire_none"

    def context_mask(self, models):
        return np.zeros(models.selector.d_s)

    def plan(self, models, history, t, context_masked):
        return np.zeros((models.planner.T, models.planner.d))


def next_acquisition(M: np.ndarray, t: int) -> Optional[Tuple[int, np.ndarray]]:
    """
    下一个获取时间

    Args:
        M: 已通过 keep_after 限制到未来行的 T×d 计划
        t: 当前时间步

    Returns:
        (t_next, 该行掩码)；计划为空时返回 None 表示终止
    """
    grid = np.asarray(M)
    nonzero = np.flatnonzero(grid[t:].any(axis=1))
    if nonzero.size == 0:
        return None
    row = t + int(nonzero[0])
    return row + 1, grid[row].astype(np.float64).copy()


def infer(
    models: ReactModels,
    instance: Instance,
    costs: CostSpec,
    policy: Optional[AcquisitionPolicy] = None,
) -> TrajectoryRecord:
    """
    单个实例的推理期获取

    第一阶段: 阈值化背景获取，并在空历史上 (t=0) 生成初始计划
    第二阶段: t = 1..T，仅在 t == t_next 时获取并重新规划，每一步都做预测
    """
    if not models.is_finite():
        raise CheckpointError("模型参数含 NaN/Inf，无法推理")
    policy = policy or ReactPolicy()
    T, d = models.planner.T, models.planner.d
    policy.start(models, instance)

    m_s = np.asarray(policy.context_mask(models), dtype=np.float64)
    s_tilde = m_s * instance.context
    history = np.zeros((T, d))

    plan = keep_after(policy.plan(models, history, 0, s_tilde), 0)
    upcoming = next_acquisition(plan, 0)
    termination_step = 0 if upcoming is None else None

    steps = []
    temporal_cost = 0.0
    for t in range(1, T + 1):
        acquired = np.zeros(d)
        replanned = False
        if upcoming is not None and t == upcoming[0]:
            # 获取并重新规划
            acquired = upcoming[1]
            history[t - 1] = acquired * instance.temporal[t - 1]
            temporal_cost += float(acquired @ costs.c_x)
            plan = keep_after(policy.plan(models, history, t, s_tilde), t)
            upcoming = next_acquisition(plan, t)
            replanned = True
            if upcoming is None:
                termination_step = t
        probabilities = predict(models.predictor, history, s_tilde, t)
        steps.append(StepRecord(t=t, prediction=probabilities.tolist(),
                                acquired=acquired.astype(int).tolist(), replanned=replanned))

    context_cost = float(m_s @ costs.c_s)
    return TrajectoryRecord(
        instance_id=instance.id,
        context_mask=m_s.astype(int).tolist(),
        steps=steps,
        termination_step=termination_step,
        context_cost=context_cost,
        temporal_cost=temporal_cost,
        total_cost=context_cost + temporal_cost,
    )


def summarize_records(records: Sequence[TrajectoryRecord]) -> InferenceSummary:
    """平均成本汇总 (算术平均: 求和后除以 n)"""
    n = len(records)
    if n == 0:
        return InferenceSummary(n=0, defined=False)
    return InferenceSummary(
        n=n,
        mean_total_cost=sum(r.total_cost for r in records) / n,
        mean_temporal_cost=sum(r.temporal_cost for r in records) / n,
        mean_context_cost=sum(r.context_cost for r in records) / n,
    )


def infer_dataset(
    models: ReactModels,
    instances: Sequence[Instance],
    costs: CostSpec,
    policy: Optional[AcquisitionPolicy] = None,
) -> Tuple[List[TrajectoryRecord], InferenceSummary]:
    """对数据集逐实例推理并汇总平均成本"""
    records = [infer(models, instance, costs, policy) for instance in instances]
    summary = summarize_records(records)
    if not summary.defined:
        logger.warning("数据集为空，成本汇总未定义")
    return records, summary
