"""
λ 扫描服务
逐个 λ 训练策略并在测试集上评估，输出成本-性能表与单调性摘要
"""
from typing import List, Optional, Sequence
import logging
import math

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from services.evaluation_service import pooled_metrics
from services.inference_service import infer_dataset
from services.model_service import ReactModels
from services.training_service import TrainingService
from storage.models import DatasetManifest, Instance, SweepRow, TrainConfig
from storage.store_manager import StoreManager
from utils.errors import ConfigurationError, ReactError

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["lambda", "total_cost", "temporal_cost", "context_cost", "auroc", "auprc"]


def parse_lambdas(text: str) -> List[float]:
    """解析逗号分隔的 λ 列表"""
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigurationError(f"λ 列表格式错误: {e}")
    if not values:
        raise ConfigurationError("λ 列表不能为空")
    if any(v < 0 for v in values):
        raise ConfigurationError("λ 必须非负")
    return values


class SweepService:
    """λ 扫描服务"""

    def __init__(self, store: Optional[StoreManager] = None):
        self.store = store or StoreManager()
        self.training = TrainingService(self.store)

    def sweep(
        self,
        manifest: DatasetManifest,
        train: Sequence[Instance],
        val: Sequence[Instance],
        test: Sequence[Instance],
        lambdas: Sequence[float],
        base_cfg: TrainConfig,
        pretrained: Optional[ReactModels] = None,
    ) -> List[SweepRow]:
        """
        每个 λ 训练一个策略，并按 λ 降序返回结果行

        share_pretrained 为真时所有 λ 共用同一个预训练预测器；单个 λ 训练失败只影响该行
        """
        if not lambdas:
            raise ConfigurationError("λ 列表不能为空")
        costs = manifest.cost_spec()
        if pretrained is None and base_cfg.share_pretrained:
            pretrained, _ = self.training.pretrain(train, val, manifest, base_cfg)

        rows = []
        for lam in sorted(lambdas, reverse=True):
            cfg = base_cfg.replace(lam=lam)
            try:
                start = pretrained.copy() if pretrained is not None else None
                result = self.training.train(train, val, manifest, cfg, models=start)
                records, summary = infer_dataset(result.models, test, costs)
                roc, pr = pooled_metrics(records, test)
                row = SweepRow(
                    lam=lam,
                    total_cost=summary.mean_total_cost,
                    temporal_cost=summary.mean_temporal_cost,
                    context_cost=summary.mean_context_cost,
                    auroc=roc,
                    auprc=pr,
                )
                logger.info(f"λ={lam}: {summary.format_line(roc, pr)}")
            except ReactError as e:
                logger.warning(f"λ={lam} 训练或评估失败: {e}")
                row = SweepRow(lam=lam, total_cost=math.nan, temporal_cost=math.nan, context_cost=math.nan,
                               auroc=None, auprc=None, error=f"{e.kind}: {e}")
            rows.append(row)
        return rows

    def write_csv(self, path, rows: Sequence[SweepRow]) -> pd.DataFrame:
        """写出扫描 CSV (列: lambda,total_cost,temporal_cost,context_cost,auroc,auprc)"""
        table = sweep_table(rows)
        self.store.write_table(path, table)
        return table


def sweep_table(rows: Sequence[SweepRow]) -> pd.DataFrame:
    return pd.DataFrame([row.to_row() for row in rows], columns=SWEEP_COLUMNS)


def monotonicity_summary(rows: Sequence[SweepRow]) -> Optional[float]:
    """λ 与总成本的 Spearman 相关系数 (只统计成功的行)；不足两行或成本恒定时返回 None"""
    valid = [row for row in rows if not row.error and np.isfinite(row.total_cost)]
    if len(valid) < 2:
        return None
    correlation, _ = spearmanr([row.lam for row in valid], [row.total_cost for row in valid])
    return None if np.isnan(correlation) else float(correlation)
