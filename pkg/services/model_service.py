"""
模型服务
背景选择器 α、纵向规划器 π_θ、预测器 f_φ 的组装与前向计算
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple
import logging

import numpy as np

from storage.models import DatasetManifest
from utils.errors import ConfigurationError, InputError
from utils.gating import GateMode, GateResult, gate_vector
from utils.nn_core import (
    MlpSpec, MlpTape, ParamTensor, init_mlp_params, mlp_forward, sinusoidal_time_embedding, softmax,
)

logger = logging.getLogger(__name__)

PLANNER_HIDDEN = [512, 256, 128]
PREDICTOR_HIDDEN = [64, 64, 64]
TIME_EMBEDDING_DIM = 64


@dataclass
class ContextSelector:
    """背景选择器: 长度 d_s 的可学习 logits"""
    alpha: ParamTensor

    @property
    def d_s(self) -> int:
        return self.alpha.shape[0]

    @property
    def params(self) -> List[ParamTensor]:
        return [self.alpha]


@dataclass
class Planner:
    """
    纵向规划器
    输入布局: flatten(掩码历史, T·d) ‖ 时间嵌入(t, D) ‖ 掩码背景(d_s)
    输出: T·d 个 logits，重排为 T×d 网格
    """
    mlp: MlpSpec
    params: List[ParamTensor]
    T: int
    d: int
    d_s: int
    time_dim: int = TIME_EMBEDDING_DIM

    def build_inputs(self, masked_history: np.ndarray, t: np.ndarray, context_masked: np.ndarray) -> np.ndarray:
        """按固定布局拼接批量输入 (n 行)"""
        history = np.asarray(masked_history, dtype=np.float64).reshape(-1, self.T * self.d)
        context = np.asarray(context_masked, dtype=np.float64).reshape(-1, self.d_s)
        steps = np.atleast_1d(np.asarray(t))
        if not (history.shape[0] == context.shape[0] == steps.shape[0]):
            raise ConfigurationError("规划器输入批量大小不一致")
        embedding = np.stack([sinusoidal_time_embedding(int(s), self.T, self.time_dim) for s in steps])
        return np.concatenate([history, embedding, context], axis=1)


@dataclass
class Predictor:
    """
    预测器
    输入布局: flatten(掩码历史, T·d) ‖ 掩码背景(d_s) ‖ 归一化时间 t'/T
    输出: C 个类别 logits
    """
    mlp: MlpSpec
    params: List[ParamTensor]
    T: int
    d: int
    d_s: int
    C: int

    def build_inputs(self, masked_history: np.ndarray, context_masked: np.ndarray, t_prime: np.ndarray) -> np.ndarray:
        history = np.asarray(masked_history, dtype=np.float64).reshape(-1, self.T * self.d)
        context = np.asarray(context_masked, dtype=np.float64).reshape(-1, self.d_s)
        steps = np.atleast_1d(np.asarray(t_prime, dtype=np.float64))
        if not (history.shape[0] == context.shape[0] == steps.shape[0]):
            raise ConfigurationError("预测器输入批量大小不一致")
        if np.any(steps < 1) or np.any(steps > self.T):
            raise InputError(f"目标时间步必须位于 [1, {self.T}]")
        return np.concatenate([history, context, (steps / self.T)[:, None]], axis=1)

    def logits(self, inputs: np.ndarray, dropout_masks=None) -> Tuple[np.ndarray, MlpTape]:
        return mlp_forward(self.mlp, self.params, inputs, dropout_masks)


@dataclass
class ReactModels:
    """三个组件的集合"""
    selector: ContextSelector
    planner: Planner
    predictor: Predictor

    @property
    def policy_params(self) -> List[ParamTensor]:
        return [*self.selector.params, *self.planner.params]

    @property
    def all_params(self) -> List[ParamTensor]:
        return [*self.policy_params, *self.predictor.params]

    def zero_grad(self):
        for p in self.all_params:
            p.zero_grad()

    def copy(self) -> "ReactModels":
        """深拷贝参数 (结构共享)"""
        return ReactModels(
            selector=ContextSelector(self.selector.alpha.copy()),
            planner=Planner(self.planner.mlp, [p.copy() for p in self.planner.params],
                            self.planner.T, self.planner.d, self.planner.d_s, self.planner.time_dim),
            predictor=Predictor(self.predictor.mlp, [p.copy() for p in self.predictor.params],
                                self.predictor.T, self.predictor.d, self.predictor.d_s, self.predictor.C),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p.values)) for p in self.all_params)


def planner_spec(manifest: DatasetManifest, hidden: Optional[List[int]] = None,
                 time_dim: int = TIME_EMBEDDING_DIM) -> MlpSpec:
    size = manifest.T * manifest.d
    return MlpSpec(input_dim=size + time_dim + manifest.d_s,
                   hidden_dims=list(hidden or PLANNER_HIDDEN), output_dim=size)


def predictor_spec(manifest: DatasetManifest, hidden: Optional[List[int]] = None) -> MlpSpec:
    return MlpSpec(input_dim=manifest.T * manifest.d + manifest.d_s + 1,
                   hidden_dims=list(hidden or PREDICTOR_HIDDEN), output_dim=manifest.C)


def init_models(
    manifest: DatasetManifest,
    seed: int,
    planner_hidden: Optional[List[int]] = None,
    predictor_hidden: Optional[List[int]] = None,
    time_dim: int = TIME_EMBEDDING_DIM,
) -> ReactModels:
    """
    初始化三个组件

    α 初始化为零 (噪声下初始获取概率约0.5)，MLP 使用 He-uniform；给定种子完全确定
    """
    if min(manifest.d_s, manifest.d, manifest.T) < 1 or manifest.C < 2:
        raise ConfigurationError("清单维度必须为正")
    rng = np.random.default_rng(seed)
    p_spec = planner_spec(manifest, planner_hidden, time_dim)
    f_spec = predictor_spec(manifest, predictor_hidden)
    models = ReactModels(
        selector=ContextSelector(ParamTensor(np.zeros(manifest.d_s), name="alpha")),
        planner=Planner(p_spec, init_mlp_params(p_spec, rng, "planner."),
                        manifest.T, manifest.d, manifest.d_s, time_dim),
        predictor=Predictor(f_spec, init_mlp_params(f_spec, rng, "predictor."),
                            manifest.T, manifest.d, manifest.d_s, manifest.C),
    )
    logger.debug(
        f"模型初始化完成: 规划器参数 {p_spec.parameter_count()} 个, 预测器参数 {f_spec.parameter_count()} 个"
    )
    return models


def planner_logits(planner: Planner, masked_history: np.ndarray, t: int, context_masked: np.ndarray) -> np.ndarray:
    """
    计算完整的 特征×时间 logits 网格

    Args:
        masked_history: T×d，当前观测状态之后的行为零
        t: 当前时间步 (0..T)
        context_masked: 长度 d_s 的掩码背景

    Returns:
        T×d 网格，由调用方施加 keep_after 或按行索引
    """
    history = np.asarray(masked_history, dtype=np.float64)
    if history.shape != (planner.T, planner.d):
        raise ConfigurationError(f"历史形状 {history.shape} 应为 ({planner.T}, {planner.d})")
    if np.shape(context_masked) != (planner.d_s,):
        raise ConfigurationError(f"背景长度应为 {planner.d_s}")
    inputs = planner.build_inputs(history[None], np.array([t]), np.asarray(context_masked)[None])
    output, _ = mlp_forward(planner.mlp, planner.params, inputs)
    return output.reshape(planner.T, planner.d)


def predict(predictor: Predictor, masked_history: np.ndarray, context_masked: np.ndarray, t_prime: int) -> np.ndarray:
    """返回目标时间步 t' 的类别概率向量"""
    if not 1 <= t_prime <= predictor.T:
        raise InputError(f"t_prime={t_prime} 超出 [1, {predictor.T}]")
    history = np.asarray(masked_history, dtype=np.float64)
    if history.shape != (predictor.T, predictor.d):
        raise ConfigurationError(f"历史形状 {history.shape} 应为 ({predictor.T}, {predictor.d})")
    inputs = predictor.build_inputs(history[None], np.asarray(context_masked)[None], np.array([t_prime]))
    logits, _ = predictor.logits(inputs)
    return softmax(logits[0])


def context_mask(selector: ContextSelector, mode: GateMode, tau: float = 1.0,
                 rng: Optional[np.random.Generator] = None) -> GateResult:
    """背景掩码: 训练时随机门控，推理时确定性阈值 σ(α) > 0.5"""
    return gate_vector(selector.alpha.values, mode, tau, rng)
