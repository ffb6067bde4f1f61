"""
存储管理器
数据集、检查点、推理记录的 JSON 读写，指标日志 (JSON lines)，以及原子写入
"""
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

import config
from services.model_service import ContextSelector, Planner, Predictor, ReactModels
from storage.models import DatasetManifest, InferenceSummary, Instance, TrainConfig, TrajectoryRecord
from utils.errors import CheckpointError, IngestionError
from utils.nn_core import MlpSpec, ParamTensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FORMAT = "react-checkpoint"
CHECKPOINT_VERSION = 1


class StoreManager:
    """存储管理器"""

    def __init__(self, base_dir: Optional[Path] = None):
        self.base_dir = Path(base_dir) if base_dir is not None else config.OUTPUT_DIR

    def resolve(self, path: PathLike) -> Path:
        """相对路径相对于 base_dir 解析"""
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    @contextmanager
    def atomic_write(self, path: PathLike, mode: str = "w"):
        """
        原子写入的上下文管理器

        先写入同目录临时文件，成功后替换目标文件；出错时删除临时文件并重新抛出
        """
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        try:
            with os.fdopen(fd, mode, encoding=None if "b" in mode else "utf-8") as handle:
                yield handle
            os.replace(tmp_name, target)
        except Exception as e:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise e

    def write_json(self, path: PathLike, data: Any):
        with self.atomic_write(path) as f:
            json.dump(data, f, ensure_ascii=False, allow_nan=False)
        logger.info(f"已写入 {self.resolve(path)}")

    def read_json(self, path: PathLike) -> Any:
        target = self.resolve(path)
        with open(target, "r", encoding="utf-8") as f:
            try:
                return json.load(f)
            except json.JSONDecodeError as e:
                raise IngestionError(f"JSON 解析失败: {e.msg}", field=str(target.name), line=e.lineno)

    # ============ 数据集 ============

    def save_dataset(self, path: PathLike, manifest: DatasetManifest, instances: Sequence[Instance]):
        """写出 {manifest, instances[]} 单文档数据集"""
        manifest.validate()
        for instance in instances:
            instance.validate(manifest)
        self.write_json(path, {
            "manifest": manifest.to_json(),
            "instances": [instance.to_json() for instance in instances],
        })

    def load_dataset(self, path: PathLike) -> Tuple[DatasetManifest, List[Instance]]:
        """读取并完整校验数据集"""
        data = self.read_json(path)
        if not isinstance(data, dict) or "manifest" not in data or "instances" not in data:
            raise IngestionError("数据集必须包含 manifest 与 instances", field="root")
        manifest = DatasetManifest.from_json(data["manifest"])
        instances = []
        seen = set()
        for raw in data["instances"]:
            instance = Instance.from_json(raw)
            instance.validate(manifest)
            if instance.id in seen:
                raise IngestionError("实例ID重复", instance_id=instance.id, field="id")
            seen.add(instance.id)
            instances.append(instance)
        logger.info(f"已加载数据集: {len(instances)} 个实例 (d_s={manifest.d_s}, d={manifest.d}, T={manifest.T})")
        return manifest, instances

    # ============ 检查点 ============

    def save_checkpoint(
        self,
        path: PathLike,
        models: ReactModels,
        manifest: DatasetManifest,
        cfg: TrainConfig,
        extra: Optional[Dict[str, Any]] = None,
    ):
        """
        自描述 JSON 检查点: 清单、网络结构、逐张量平铺参数、τ 与训练配置快照

        浮点数以最短往返表示写出，读回后逐位一致
        """
        if not models.is_finite():
            raise CheckpointError("模型参数含 NaN/Inf，拒绝保存检查点")
        self.write_json(path, {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "manifest": manifest.to_json(),
            "tau": cfg.tau,
            "config": cfg.to_json(),
            "planner": {"mlp": models.planner.mlp.to_json(), "time_dim": models.planner.time_dim},
            "predictor": {"mlp": models.predictor.mlp.to_json()},
            "params": [_param_to_json(p) for p in models.all_params],
            "extra": extra or {},
        })

    def load_checkpoint(self, path: PathLike) -> Tuple[ReactModels, DatasetManifest, TrainConfig]:
        """读取检查点；结构不符或参数非有限时抛出 CheckpointError"""
        try:
            data = self.read_json(path)
        except IngestionError as e:
            raise CheckpointError(str(e))
        if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} 不是有效的检查点文件")
        try:
            manifest = DatasetManifest.from_json(data["manifest"])
            cfg = TrainConfig.from_json(data["config"])
            planner_mlp = MlpSpec.from_json(data["planner"]["mlp"])
            predictor_mlp = MlpSpec.from_json(data["predictor"]["mlp"])
            params = {p["name"]: _param_from_json(p) for p in data["params"]}
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"检查点字段缺失或损坏: {e}")

        def take(prefix: str, spec: MlpSpec) -> List[ParamTensor]:
            tensors = []
            for i, (out_dim, in_dim) in enumerate(spec.layer_shapes(), start=1):
                for name, shape in ((f"{prefix}W{i}", (out_dim, in_dim)), (f"{prefix}b{i}", (out_dim,))):
                    if name not in params or params[name].shape != shape:
                        raise CheckpointError(f"参数 {name} 缺失或形状不符")
                    tensors.append(params[name])
            return tensors

        if "alpha" not in params or params["alpha"].shape != (manifest.d_s,):
            raise CheckpointError("参数 alpha 缺失或形状不符")
        models = ReactModels(
            selector=ContextSelector(params["alpha"]),
            planner=Planner(planner_mlp, take("planner.", planner_mlp), manifest.T, manifest.d, manifest.d_s,
                            int(data["planner"].get("time_dim", cfg.time_embedding_dim))),
            predictor=Predictor(predictor_mlp, take("predictor.", predictor_mlp),
                                manifest.T, manifest.d, manifest.d_s, manifest.C),
        )
        if not models.is_finite():
            raise CheckpointError("检查点参数含 NaN/Inf")
        logger.info(f"已加载检查点 {self.resolve(path)}")
        return models, manifest, cfg

    # ============ 推理记录 ============

    def save_records(self, path: PathLike, records: Sequence[TrajectoryRecord],
                     summary: Optional[InferenceSummary] = None):
        data: Dict[str, Any] = {"records": [r.to_json() for r in records]}
        if summary is not None:
            data["summary"] = summary.to_json()
        self.write_json(path, data)

    def load_records(self, path: PathLike) -> List[TrajectoryRecord]:
        data = self.read_json(path)
        try:
            raw = data["records"] if isinstance(data, dict) else data
            return [TrajectoryRecord.from_json(r) for r in raw]
        except (KeyError, TypeError, ValueError) as e:
            raise IngestionError(f"推理记录格式错误: {e}", field="records")

    # ============ 指标日志 ============

    def append_metrics(self, path: PathLike, entry: Dict[str, Any]):
        """追加一行 JSON 指标"""
        target = self.resolve(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def read_metrics(self, path: PathLike) -> pd.DataFrame:
        target = self.resolve(path)
        if not target.exists() or target.stat().st_size == 0:
            return pd.DataFrame(columns=["iteration", "phase", "loss", "rollout_cost", "val_auroc"])
        return pd.read_json(target, lines=True)

    def write_table(self, path: PathLike, table: pd.DataFrame):
        """CSV 表格 (原子写入)"""
        with self.atomic_write(path) as f:
            table.to_csv(f, index=False)
        logger.info(f"已写入 {self.resolve(path)}")

    def write_text(self, path: PathLike, text: str):
        with self.atomic_write(path) as f:
            f.write(text)
        logger.info(f"已写入 {self.resolve(path)}")


def _param_to_json(p: ParamTensor) -> dict:
    return {"name": p.name, "shape": list(p.values.shape), "values": p.values.ravel().tolist()}


def _param_from_json(data: dict) -> ParamTensor:
    values = np.asarray(data["values"], dtype=np.float64)
    shape = tuple(int(s) for s in data["shape"])
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"参数 {data.get('name')} 的元素个数与形状不符")
    return ParamTensor(values.reshape(shape), name=str(data["name"]))
