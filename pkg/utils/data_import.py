"""
数据导入工具
数据集划分、按训练集统计量标准化，以及从长格式 CSV 导入纵向数据
"""
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from storage.models import DatasetManifest, Instance
from utils.errors import ConfigurationError, IngestionError, InputError

logger = logging.getLogger(__name__)

ID_COLUMN = "id"
TIME_COLUMN = "t"
LABEL_COLUMN = "label"


# ============ 划分与标准化 ============

def split(
    instances: Sequence[Instance],
    fractions: Sequence[float],
    seed: int,
) -> Tuple[List[Instance], List[Instance], List[Instance]]:
    """
    按比例随机划分为 训练/验证/测试

    Args:
        fractions: 三个正数，和为1 (误差 1e-9)
        seed: 给定种子划分完全确定

    Returns:
        (train, val, test)，互不相交且并集为输入
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"划分比例必须为三个正数且和为1: {fractions}")
    n = len(instances)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    train = [instances[i] for i in order[:n_train]]
    val = [instances[i] for i in order[n_train: n_train + n_val]]
    test = [instances[i] for i in order[n_train + n_val:]]
    logger.info(f"数据集划分: 训练 {len(train)} / 验证 {len(val)} / 测试 {len(test)}")
    return train, val, test


def fit_standardizer(instances: Sequence[Instance]) -> Dict[str, List[float]]:
    """计算背景特征与时序特征 (跨时间汇总) 的均值和标准差；零方差特征的标准差记为1"""
    if not instances:
        raise InputError("无法在空数据集上拟合标准化参数")
    context = np.stack([inst.context for inst in instances])
    temporal = np.concatenate([inst.temporal for inst in instances], axis=0)
    context_std = context.std(axis=0)
    temporal_std = temporal.std(axis=0)
    return {
        "context_mean": context.mean(axis=0).tolist(),
        "context_std": np.where(context_std > 0, context_std, 1.0).tolist(),
        "temporal_mean": temporal.mean(axis=0).tolist(),
        "temporal_std": np.where(temporal_std > 0, temporal_std, 1.0).tolist(),
    }


def apply_standardizer(instances: Sequence[Instance], params: Dict[str, List[float]]) -> List[Instance]:
    """返回标准化后的新实例列表 (标签不变)"""
    try:
        c_mean, c_std = np.asarray(params["context_mean"]), np.asarray(params["context_std"])
        x_mean, x_std = np.asarray(params["temporal_mean"]), np.asarray(params["temporal_std"])
    except KeyError as e:
        raise ConfigurationError(f"标准化参数缺少 {e}")
    return [
        Instance(
            id=inst.id,
            context=(inst.context - c_mean) / c_std,
            temporal=(inst.temporal - x_mean) / x_std,
            labels=inst.labels.copy(),
        )
        for inst in instances
    ]


def prepare_splits(
    manifest: DatasetManifest,
    instances: Sequence[Instance],
    fractions: Sequence[float],
    seed: int,
    standardization: Optional[Dict[str, List[float]]] = None,
) -> Tuple[DatasetManifest, List[Instance], List[Instance], List[Instance]]:
    """
    划分并标准化

    standardization 为空时用训练集拟合，否则沿用已有参数 (例如检查点中保存的)

    Returns:
        (记录了标准化参数的清单, train, val, test)
    """
    train, val, test = split(instances, fractions, seed)
    if standardization is None:
        standardization = manifest.standardization or fit_standardizer(train)
    prepared = replace(manifest, standardization=standardization)
    return (prepared, apply_standardizer(train, standardization),
            apply_standardizer(val, standardization), apply_standardizer(test, standardization))


# ============ 长格式 CSV 导入 ============

class DataImporter:
    """纵向数据导入器"""

    def __init__(self, encoding: str = "utf-8"):
        self.encoding = encoding

    def import_long_csv(
        self,
        temporal_csv: str,
        context_csv: str,
        n_classes: Optional[int] = None,
        context_costs: Optional[Sequence[float]] = None,
        temporal_costs: Optional[Sequence[float]] = None,
    ) -> Tuple[DatasetManifest, List[Instance], List[str]]:
        """
        从长格式 CSV 导入

        期望的列: 时序表 id, t, label, <时序特征...>；背景表 id, <背景特征...>
        t 取 1..T；时间网格不完整或缺少背景的实例被跳过并记录错误

        Returns:
            (清单, 实例列表, 错误信息列表)
        """
        errors: List[str] = []
        try:
            temporal_df = pd.read_csv(temporal_csv, encoding=self.encoding)
            context_df = pd.read_csv(context_csv, encoding=self.encoding)
        except (OSError, pd.errors.ParserError, UnicodeDecodeError) as e:
            raise IngestionError(f"读取文件失败: {e}")

        for name, df, required in (("时序表", temporal_df, [ID_COLUMN, TIME_COLUMN, LABEL_COLUMN]),
                                   ("背景表", context_df, [ID_COLUMN])):
            missing = [col for col in required if col not in df.columns]
            if missing:
                raise IngestionError(f"{name}缺少必需列: {missing}", field=",".join(missing))

        temporal_names = [c for c in temporal_df.columns if c not in (ID_COLUMN, TIME_COLUMN, LABEL_COLUMN)]
        context_names = [c for c in context_df.columns if c != ID_COLUMN]
        if not temporal_names or not context_names:
            raise IngestionError("时序表与背景表都至少需要一个特征列")

        bad_rows = temporal_df[temporal_names + [TIME_COLUMN, LABEL_COLUMN]].isna().any(axis=1)
        for idx in np.flatnonzero(bad_rows.to_numpy()):
            errors.append(f"时序表第{idx + 2}行: 存在缺失值")
        temporal_df = temporal_df[~bad_rows]
        if temporal_df.empty:
            raise IngestionError("时序表没有有效行")

        T = int(temporal_df[TIME_COLUMN].max())
        label_max = int(temporal_df[LABEL_COLUMN].max())
        C = n_classes if n_classes is not None else max(2, label_max + 1)

        context_df = context_df.assign(**{ID_COLUMN: context_df[ID_COLUMN].astype(str)})
        contexts = context_df.drop_duplicates(subset=ID_COLUMN).set_index(ID_COLUMN)

        manifest = DatasetManifest(
            d_s=len(context_names),
            d=len(temporal_names),
            T=T,
            C=C,
            context_costs=list(context_costs) if context_costs is not None else [1.0] * len(context_names),
            temporal_costs=list(temporal_costs) if temporal_costs is not None else [1.0] * len(temporal_names),
            context_names=[str(c) for c in context_names],
            temporal_names=[str(c) for c in temporal_names],
        )
        manifest.validate()

        instances = []
        for instance_id, group in temporal_df.groupby(temporal_df[ID_COLUMN].astype(str), sort=False):
            group = group.sort_values(TIME_COLUMN)
            steps = group[TIME_COLUMN].astype(int).tolist()
            if steps != list(range(1, T + 1)):
                errors.append(f"实例 {instance_id}: 时间步不完整或重复 (应为 1..{T})")
                continue
            if instance_id not in contexts.index:
                errors.append(f"实例 {instance_id}: 背景表中不存在")
                continue
            row = contexts.loc[instance_id, context_names]
            if row.isna().any():
                errors.append(f"实例 {instance_id}: 背景特征存在缺失值")
                continue
            instance = Instance(
                id=instance_id,
                context=row.to_numpy(dtype=np.float64),
                temporal=group[temporal_names].to_numpy(dtype=np.float64),
                labels=group[LABEL_COLUMN].to_numpy(dtype=np.int64),
            )
            try:
                instance.validate(manifest)
            except IngestionError as e:
                errors.append(str(e))
                continue
            instances.append(instance)

        logger.info(f"长格式导入完成: {len(instances)} 个实例, {len(errors)} 条错误")
        return manifest, instances, errors

    def generate_import_template(self, output_dir: str, temporal_features: int = 2, context_features: int = 2):
        """生成两张空的导入模板 CSV"""
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        temporal_columns = [ID_COLUMN, TIME_COLUMN, LABEL_COLUMN] + [f"x{i}" for i in range(temporal_features)]
        context_columns = [ID_COLUMN] + [f"s{i}" for i in range(context_features)]
        pd.DataFrame(columns=temporal_columns).to_csv(out / "temporal_template.csv", index=False)
        pd.DataFrame(columns=context_columns).to_csv(out / "context_template.csv", index=False)
        logger.info(f"导入模板已生成: {out}")
        return out / "temporal_template.csv", out / "context_template.csv"
