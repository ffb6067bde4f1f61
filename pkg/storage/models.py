"""
数据模型定义
数据集、成本、训练配置、参考计划与推理轨迹，均可与JSON互转
"""
from dataclasses import dataclass, field, fields
from typing import Optional, List, Dict, Any
import math

import numpy as np

import config
from utils.errors import ConfigurationError, IngestionError


@dataclass
class CostSpec:
    """获取成本: c_s 为一次性背景成本, c_x 为每个时间点的特征成本"""
    c_s: np.ndarray
    c_x: np.ndarray

    def __post_init__(self):
        self.c_s = np.asarray(self.c_s, dtype=np.float64)
        self.c_x = np.asarray(self.c_x, dtype=np.float64)
        if np.any(self.c_s < 0) or np.any(self.c_x < 0):
            raise ConfigurationError("获取成本必须非负")


@dataclass
class DatasetManifest:
    """数据集清单"""
    d_s: int
    d: int
    T: int
    C: int
    context_costs: List[float] = field(default_factory=list)
    temporal_costs: List[float] = field(default_factory=list)
    context_names: List[str] = field(default_factory=list)
    temporal_names: List[str] = field(default_factory=list)
    standardization: Optional[Dict[str, List[float]]] = None

    def validate(self):
        """校验清单不变量"""
        if min(self.d_s, self.d, self.T) < 1:
            raise IngestionError("d_s, d, T 必须为正", field="manifest")
        if self.C < 2:
            raise IngestionError("类别数 C 必须 ≥ 2", field="manifest.C")
        checks = [
            ("context_costs", self.context_costs, self.d_s),
            ("temporal_costs", self.temporal_costs, self.d),
            ("context_names", self.context_names, self.d_s),
            ("temporal_names", self.temporal_names, self.d),
        ]
        for name, values, expected in checks:
            if len(values) != expected:
                raise IngestionError(f"长度为 {len(values)}, 应为 {expected}", field=f"manifest.{name}")
        if any(c < 0 for c in [*self.context_costs, *self.temporal_costs]):
            raise IngestionError("成本必须非负", field="manifest.costs")

    def cost_spec(self) -> CostSpec:
        return CostSpec(c_s=self.context_costs, c_x=self.temporal_costs)

    def to_json(self) -> dict:
        data = {
            "d_s": self.d_s,
            "d": self.d,
            "T": self.T,
            "C": self.C,
            "context_costs": list(self.context_costs),
            "temporal_costs": list(self.temporal_costs),
            "context_names": list(self.context_names),
            "temporal_names": list(self.temporal_names),
        }
        if self.standardization is not None:
            data["standardization"] = self.standardization
        return data

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        try:
            manifest = cls(
                d_s=int(data["d_s"]),
                d=int(data["d"]),
                T=int(data["T"]),
                C=int(data["C"]),
                context_costs=[float(c) for c in data["context_costs"]],
                temporal_costs=[float(c) for c in data["temporal_costs"]],
                context_names=[str(n) for n in data["context_names"]],
                temporal_names=[str(n) for n in data["temporal_names"]],
                standardization=data.get("standardization"),
            )
        except KeyError as e:
            raise IngestionError(f"缺少必需字段 {e}", field="manifest")
        except (TypeError, ValueError) as e:
            raise IngestionError(f"字段类型错误: {e}", field="manifest")
        manifest.validate()
        return manifest


@dataclass
class Instance:
    """单个受试者: 背景向量、T×d 时序矩阵、逐时间步标签"""
    id: str
    context: np.ndarray
    temporal: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.id = str(self.id)
        self.context = np.asarray(self.context, dtype=np.float64)
        self.temporal = np.asarray(self.temporal, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def validate(self, manifest: DatasetManifest):
        """按清单校验实例，错误信息包含实例ID与字段"""
        if self.context.shape != (manifest.d_s,):
            raise IngestionError(
                f"dimension mismatch: 形状 {self.context.shape}, 应为 ({manifest.d_s},)",
                instance_id=self.id, field="context",
            )
        if self.temporal.shape != (manifest.T, manifest.d):
            raise IngestionError(
                f"dimension mismatch: 形状 {self.temporal.shape}, 应为 ({manifest.T}, {manifest.d})",
                instance_id=self.id, field="temporal",
            )
        if self.labels.shape != (manifest.T,):
            raise IngestionError(
                f"dimension mismatch: 长度 {self.labels.shape}, 应为 ({manifest.T},)",
                instance_id=self.id, field="labels",
            )
        if np.any(self.labels < 0) or np.any(self.labels >= manifest.C):
            raise IngestionError(
                f"label out of range: 标签必须位于 [0, {manifest.C})",
                instance_id=self.id, field="labels",
            )
        for name, values in (("context", self.context), ("temporal", self.temporal)):
            if not np.all(np.isfinite(values)):
                raise IngestionError("存在非有限值", instance_id=self.id, field=name)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "context": self.context.tolist(),
            "temporal": self.temporal.tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "Instance":
        instance_id = str(data.get("id", ""))
        for key in ("id", "context", "temporal", "labels"):
            if key not in data:
                raise IngestionError("缺少必需字段", instance_id=instance_id, field=key)
        labels = data["labels"]
        if any(not isinstance(v, int) or isinstance(v, bool) for v in labels):
            raise IngestionError("标签必须为整数", instance_id=instance_id, field="labels")
        try:
            return cls(id=data["id"], context=data["context"], temporal=data["temporal"], labels=labels)
        except (TypeError, ValueError) as e:
            raise IngestionError(f"数值解析失败: {e}", instance_id=instance_id, field="values")


@dataclass
class SyntheticSpec:
    """合成数据生成参数"""
    n_instances: int = 200
    d_s: int = 6
    d: int = 8
    T: int = 10
    C: int = 2
    informative_context: int = 2
    informative_temporal: int = 2
    ar_coefficient: float = 0.8
    noise_std: float = 0.3
    seed: int = 0
    context_costs: Optional[List[float]] = None
    temporal_costs: Optional[List[float]] = None

    def validate(self):
        if min(self.n_instances, self.d_s, self.d, self.T) < 1:
            raise ConfigurationError("n_instances, d_s, d, T 必须为正")
        if self.C < 2:
            raise ConfigurationError("类别数 C 必须 ≥ 2")
        if not 0 <= self.informative_context <= self.d_s:
            raise ConfigurationError("informative_context 不能超过 d_s")
        if not 0 <= self.informative_temporal <= self.d:
            raise ConfigurationError("informative_temporal 不能超过 d")
        if not 0.0 < self.ar_coefficient < 1.0:
            raise ConfigurationError("自回归系数 ρ 必须位于 (0, 1)")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std 必须非负")
        if self.context_costs is not None and len(self.context_costs) != self.d_s:
            raise ConfigurationError("context_costs 长度必须等于 d_s")
        if self.temporal_costs is not None and len(self.temporal_costs) != self.d:
            raise ConfigurationError("temporal_costs 长度必须等于 d")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, data: dict) -> "SyntheticSpec":
        if not isinstance(data, dict):
            raise ConfigurationError("合成数据参数必须为 JSON 对象")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"未知的合成数据参数: {sorted(unknown)}")
        try:
            spec = cls(**data)
            spec.validate()
        except TypeError as e:
            raise ConfigurationError(f"合成数据参数类型错误: {e}")
        return spec


@dataclass
class TrainConfig:
    """训练配置 (平铺JSON, 键名与字段一致, 'lambda' 为 lam 的别名)"""
    lam: float = config.DEFAULT_TRAIN_CONFIG["lam"]
    tau: float = config.DEFAULT_TRAIN_CONFIG["tau"]
    batch_size: int = config.DEFAULT_TRAIN_CONFIG["batch_size"]
    total_batches: int = config.DEFAULT_TRAIN_CONFIG["total_batches"]
    warmup_batches: int = config.DEFAULT_TRAIN_CONFIG["warmup_batches"]
    K_candidates: int = config.DEFAULT_TRAIN_CONFIG["K_candidates"]
    lr_pretrain: float = config.DEFAULT_TRAIN_CONFIG["lr_pretrain"]
    lr_policy: float = config.DEFAULT_TRAIN_CONFIG["lr_policy"]
    lr_predictor_joint: float = config.DEFAULT_TRAIN_CONFIG["lr_predictor_joint"]
    dropout_rate: float = config.DEFAULT_TRAIN_CONFIG["dropout_rate"]
    seed: int = config.DEFAULT_TRAIN_CONFIG["seed"]
    early_stop_patience: int = config.DEFAULT_TRAIN_CONFIG["early_stop_patience"]
    max_pretrain_epochs: int = config.DEFAULT_TRAIN_CONFIG["max_pretrain_epochs"]
    eval_interval: int = config.DEFAULT_TRAIN_CONFIG["eval_interval"]
    planner_hidden: List[int] = field(default_factory=lambda: list(config.DEFAULT_TRAIN_CONFIG["planner_hidden"]))
    predictor_hidden: List[int] = field(default_factory=lambda: list(config.DEFAULT_TRAIN_CONFIG["predictor_hidden"]))
    time_embedding_dim: int = config.DEFAULT_TRAIN_CONFIG["time_embedding_dim"]
    split_fractions: List[float] = field(default_factory=lambda: list(config.DEFAULT_TRAIN_CONFIG["split_fractions"]))
    share_pretrained: bool = config.DEFAULT_TRAIN_CONFIG["share_pretrained"]

    def __post_init__(self):
        self.validate()

    def validate(self):
        """校验配置不变量"""
        if self.lam < 0:
            raise ConfigurationError(f"λ 必须非负, 实际为 {self.lam}")
        if not self.tau > 0:
            raise ConfigurationError(f"τ 必须为正, 实际为 {self.tau}")
        if self.batch_size < 1 or self.K_candidates < 1:
            raise ConfigurationError("batch_size 与 K_candidates 必须 ≥ 1")
        if self.total_batches < 0 or self.warmup_batches < 0:
            raise ConfigurationError("批次数必须非负")
        if self.warmup_batches > self.total_batches:
            raise ConfigurationError("warmup_batches 不能超过 total_batches")
        for name in ("lr_pretrain", "lr_policy", "lr_predictor_joint"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} 必须为正")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate 必须位于 [0, 1)")
        if self.early_stop_patience < 1 or self.max_pretrain_epochs < 1 or self.eval_interval < 1:
            raise ConfigurationError("early_stop_patience, max_pretrain_epochs, eval_interval 必须 ≥ 1")
        if self.time_embedding_dim < 2 or self.time_embedding_dim % 2 != 0:
            raise ConfigurationError("time_embedding_dim 必须为正偶数")
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions) \
                or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError(f"split_fractions 必须为三个正数且和为1: {self.split_fractions}")

    @property
    def self_batches(self) -> int:
        return self.total_batches - self.warmup_batches

    def replace(self, **changes) -> "TrainConfig":
        data = self.to_json()
        data.update(changes)
        return TrainConfig(**data)

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "TrainConfig":
        """从平铺JSON创建配置，未提供的键使用 config.DEFAULT_TRAIN_CONFIG"""
        data = dict(data)
        if "lambda" in data:
            if "lam" in data:
                raise ConfigurationError("不能同时提供 'lambda' 与 'lam'")
            data["lam"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"未知的配置键: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigurationError(f"配置值类型错误: {e}")


@dataclass
class ReferencePlan:
    """离线参考计划: 候选池中 J_λ 最小的计划"""
    instance_id: str
    instance_index: int
    m_s_star: np.ndarray
    M_star: np.ndarray
    score: float
    cost: float
    candidate_index: int = 0


@dataclass
class TrajectoryState:
    """训练状态 (实例, t, M_prev)，M_prev 中 t 之后的行全为零"""
    instance_index: int
    t: int
    M_prev: np.ndarray


@dataclass
class StepRecord:
    """推理中单个时间步的记录"""
    t: int
    prediction: List[float]
    acquired: List[int]
    replanned: bool

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "prediction": list(self.prediction),
            "acquired": list(self.acquired),
            "replanned": self.replanned,
        }

    @classmethod
    def from_json(cls, data: dict) -> "StepRecord":
        return cls(
            t=int(data["t"]),
            prediction=[float(p) for p in data["prediction"]],
            acquired=[int(a) for a in data["acquired"]],
            replanned=bool(data["replanned"]),
        )


@dataclass
class TrajectoryRecord:
    """推理轨迹: 背景掩码、逐步预测与获取、终止步与成本"""
    instance_id: str
    context_mask: List[int]
    steps: List[StepRecord]
    termination_step: Optional[int]
    context_cost: float
    temporal_cost: float
    total_cost: float

    def acquired_grid(self) -> np.ndarray:
        """T×d 已获取掩码"""
        return np.array([s.acquired for s in self.steps], dtype=np.float64)

    def prediction_matrix(self) -> np.ndarray:
        return np.array([s.prediction for s in self.steps], dtype=np.float64)

    def acquisition_times(self) -> List[int]:
        return [s.t for s in self.steps if any(s.acquired)]

    def to_json(self) -> dict:
        return {
            "id": self.instance_id,
            "context_mask": list(self.context_mask),
            "steps": [s.to_json() for s in self.steps],
            "termination_step": self.termination_step,
            "costs": {
                "context": self.context_cost,
                "temporal": self.temporal_cost,
                "total": self.total_cost,
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrajectoryRecord":
        costs = data["costs"]
        return cls(
            instance_id=str(data["id"]),
            context_mask=[int(m) for m in data["context_mask"]],
            steps=[StepRecord.from_json(s) for s in data["steps"]],
            termination_step=data.get("termination_step"),
            context_cost=float(costs["context"]),
            temporal_cost=float(costs["temporal"]),
            total_cost=float(costs["total"]),
        )


@dataclass
class InferenceSummary:
    """数据集级平均成本; 空数据集时 defined=False"""
    n: int
    mean_total_cost: float = math.nan
    mean_temporal_cost: float = math.nan
    mean_context_cost: float = math.nan
    defined: bool = True

    def format_line(self, auroc: Optional[float] = None, auprc: Optional[float] = None) -> str:
        """按 'Total/Longitudinal Costs | AUROC/AUPRC' 的格式输出"""
        if not self.defined:
            return "undefined (empty dataset)"

        def fmt(v):
            return "n/a" if v is None else f"{v:.3f}"

        return (f"{self.mean_total_cost:.3f}/{self.mean_temporal_cost:.3f} | "
                f"{fmt(auroc)}/{fmt(auprc)}")

    def to_json(self) -> dict:
        if not self.defined:
            return {"n": self.n, "defined": False}
        return {
            "n": self.n,
            "defined": True,
            "mean_total_cost": self.mean_total_cost,
            "mean_temporal_cost": self.mean_temporal_cost,
            "mean_context_cost": self.mean_context_cost,
        }


@dataclass
class SweepRow:
    """λ 扫描的一行结果"""
    lam: float
    total_cost: float
    temporal_cost: float
    context_cost: float
    auroc: Optional[float]
    auprc: Optional[float]
    error: str = ""

    def to_row(self) -> dict:
        return {
            "lambda": self.lam,
            "total_cost": self.total_cost,
            "temporal_cost": self.temporal_cost,
            "context_cost": self.context_cost,
            "auroc": self.auroc,
            "auprc": self.auprc,
        }
