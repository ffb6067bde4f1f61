"""
评估服务
AUROC/AUPRC 指标、多分类宏平均、跨时间步汇总指标、消融与基线策略
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
from sklearn.metrics import average_precision_score, roc_auc_score

from services.inference_service import (
    AcquireAllPolicy, AcquireNonePolicy, AcquisitionPolicy, FixedIntervalPolicy, RandomRatePolicy,
    ReactPolicy, infer_dataset,
)
from services.model_service import ReactModels
from storage.models import CostSpec, InferenceSummary, Instance, TrajectoryRecord
from utils.errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)


class AblationMode(str, Enum):
    """消融/基线模式"""
    REACT = "react"
    REACT_ALL = "react_all"
    REACT_NONE = "react_none"
    RANDOM_RATE = "random_rate"
    FIXED_INTERVAL = "fixed_interval"
    ACQUIRE_ALL = "acquire_all"
    ACQUIRE_NONE = "acquire_none"


@dataclass
class AblationResult:
    """消融运行结果"""
    mode: AblationMode
    records: List[TrajectoryRecord]
    summary: InferenceSummary
    auroc: Optional[float]
    auprc: Optional[float]


# ============ 指标 ============

def auroc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """
    二分类 AUROC (Mann–Whitney 秩统计量，平局计 0.5)

    Returns:
        AUROC；标签只有一个类别时返回 None
    """
    labels = np.asarray(labels).astype(int)
    if np.unique(labels).size < 2:
        logger.warning("AUROC 未定义: 标签只包含一个类别")
        return None
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def auprc(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """平均精度 (按分数降序扫描的 PR 阶梯面积)；没有正例时返回 None"""
    labels = np.asarray(labels).astype(int)
    if labels.sum() == 0:
        logger.warning("AUPRC 未定义: 没有正例")
        return None
    return float(average_precision_score(labels, np.asarray(scores, dtype=np.float64)))


def multiclass_metrics(prob_matrix: np.ndarray, labels: Sequence[int]) -> Tuple[Optional[float], Optional[float]]:
    """
    一对其余的宏平均 AUROC/AUPRC

    C=2 时直接等于对类别1概率的二分类指标；标签中缺失的类别被跳过并记录警告
    """
    probs = np.asarray(prob_matrix, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise InputError("概率矩阵必须为 n×C 且 C ≥ 2")
    if probs.shape[0] != labels.shape[0]:
        raise InputError(f"概率行数 {probs.shape[0]} 与标签个数 {labels.shape[0]} 不一致")

    n_classes = probs.shape[1]
    if n_classes == 2:
        positive = (labels == 1).astype(int)
        return auroc(probs[:, 1], positive), auprc(probs[:, 1], positive)

    roc_values, pr_values = [], []
    for c in range(n_classes):
        positive = (labels == c).astype(int)
        if positive.sum() == 0:
            logger.warning(f"类别 {c} 在标签中缺失，宏平均时跳过")
            continue
        roc = auroc(probs[:, c], positive)
        pr = auprc(probs[:, c], positive)
        if roc is not None:
            roc_values.append(roc)
        if pr is not None:
            pr_values.append(pr)

    macro_roc = float(np.mean(roc_values)) if roc_values else None
    macro_pr = float(np.mean(pr_values)) if pr_values else None
    return macro_roc, macro_pr


def pooled_predictions(
    records: Sequence[TrajectoryRecord], instances: Sequence[Instance]
) -> Tuple[np.ndarray, np.ndarray]:
    """把所有实例所有时间步的预测与标签汇总到一起"""
    by_id: Dict[str, Instance] = {inst.id: inst for inst in instances}
    probs, labels = [], []
    for record in records:
        instance = by_id.get(record.instance_id)
        if instance is None:
            raise InputError(f"记录中的实例 {record.instance_id} 不在数据集中")
        probs.append(record.prediction_matrix())
        labels.append(instance.labels[[step.t - 1 for step in record.steps]].astype(np.int64))
    if not probs:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.concatenate(probs, axis=0), np.concatenate(labels)


def pooled_metrics(
    records: Sequence[TrajectoryRecord], instances: Sequence[Instance]
) -> Tuple[Optional[float], Optional[float]]:
    """跨时间步汇总后计算一个 AUROC/AUPRC"""
    if not records:
        return None, None
    probs, labels = pooled_predictions(records, instances)
    return multiclass_metrics(probs, labels)


# ============ 消融与基线 ============

def build_policy(
    mode: AblationMode,
    d_s: int,
    rate: Optional[float] = None,
    interval: Optional[int] = None,
    seed: int = 0,
) -> AcquisitionPolicy:
    """根据模式构造获取策略"""
    mode = AblationMode(mode)
    if mode == AblationMode.REACT:
        return ReactPolicy()
    if mode == AblationMode.REACT_ALL:
        return ReactPolicy(forced_context=np.ones(d_s))
    if mode == AblationMode.REACT_NONE:
        return ReactPolicy(forced_context=np.zeros(d_s))
    if mode == AblationMode.RANDOM_RATE:
        if rate is None:
            raise ConfigurationError("random_rate 模式需要提供 rate")
        return RandomRatePolicy(rate, seed)
    if mode == AblationMode.FIXED_INTERVAL:
        if interval is None:
            raise ConfigurationError("fixed_interval 模式需要提供 interval")
        return FixedIntervalPolicy(interval)
    if mode == AblationMode.ACQUIRE_ALL:
        return AcquireAllPolicy()
    return AcquireNonePolicy()


def ablation_policy(
    mode: AblationMode,
    models: ReactModels,
    instances: Sequence[Instance],
    costs: CostSpec,
    rate: Optional[float] = None,
    interval: Optional[int] = None,
    seed: int = 0,
) -> AblationResult:
    """
    以指定模式运行推理并评估

    所有模式共用同一个预测器，便于比较
    """
    mode = AblationMode(mode)
    policy = build_policy(mode, models.selector.d_s, rate, interval, seed)
    records, summary = infer_dataset(models, instances, costs, policy)
    roc, pr = pooled_metrics(records, instances)
    logger.info(f"[{mode.value}] {summary.format_line(roc, pr)}")
    return AblationResult(mode=mode, records=records, summary=summary, auroc=roc, auprc=pr)
