"""
Gumbel-Sigmoid 门控
训练时: 随机松弛门 + 直通估计; 推理时: 确定性硬阈值
"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from utils.errors import ConfigurationError, InputError

# 均匀分布采样的截断范围，保证双重对数有限
_U_MIN = 1e-12
_U_MAX = 1.0 - 1e-12


class GateMode(str, Enum):
    """门控模式"""
    STOCHASTIC = "stochastic"          # 训练: 注入 Gumbel 噪声，前向硬阈值
    DETERMINISTIC = "deterministic"    # 推理: 无噪声，σ(l) > 0.5
    RELAXED = "relaxed"                # 梯度校验: 前向直接使用连续代理 m̃


@dataclass
class GateSample:
    """单个门的采样结果"""
    logit: float
    noise: float
    tau: float
    relaxed: float
    hard: int


@dataclass
class GateResult:
    """向量门控结果"""
    mask: np.ndarray        # 前向取值 (硬门为 0/1; RELAXED 模式为 m̃)
    grad_diag: np.ndarray   # ∂m̃/∂l = σ'((l+g)/τ)/τ
    relaxed: np.ndarray     # 连续代理 m̃
    noise: np.ndarray


def sample_gumbel(u: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """g = -log(-log u)，u 先截断到 [1e-12, 1-1e-12]"""
    clipped = np.clip(u, _U_MIN, _U_MAX)
    g = -np.log(-np.log(clipped))
    return float(g) if np.ndim(g) == 0 else g


def draw_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    """从种子生成器抽取 Gumbel 噪声"""
    return sample_gumbel(rng.random(shape))


def _check_tau(tau: float):
    if not tau > 0:
        raise ConfigurationError(f"温度 τ 必须为正, 实际为 {tau}")


def st_gate(logit, noise, tau: float) -> Tuple[Union[int, np.ndarray], Union[float, np.ndarray]]:
    """
    直通门: 前向为 I[σ((l+g)/τ) > 0.5]，梯度为连续代理的导数 σ'((l+g)/τ)/τ

    Returns:
        (forward_value, grad_dl)
    """
    _check_tau(tau)
    z = (np.asarray(logit, dtype=np.float64) + np.asarray(noise, dtype=np.float64)) / tau
    relaxed = expit(z)
    hard = (relaxed > 0.5).astype(np.float64)
    grad = relaxed * (1.0 - relaxed) / tau
    if np.ndim(z) == 0:
        return int(hard), float(grad)
    return hard, grad


def gate_sample(logit: float, noise: float, tau: float) -> GateSample:
    """返回单个门的完整记录"""
    _check_tau(tau)
    relaxed = float(expit((logit + noise) / tau))
    return GateSample(logit=logit, noise=noise, tau=tau, relaxed=relaxed, hard=int(relaxed > 0.5))


def gate_vector(
    logits: np.ndarray,
    mode: GateMode,
    tau: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> GateResult:
    """
    对 logits 逐元素门控

    Args:
        logits: 任意形状的 logits
        mode: STOCHASTIC / DETERMINISTIC / RELAXED
        tau: 温度
        rng: 随机模式下必须提供

    Returns:
        GateResult
    """
    _check_tau(tau)
    noise = draw_gate_noise(np.shape(logits), mode, rng)
    return apply_gate(logits, noise, tau, mode)


def draw_gate_noise(shape, mode: GateMode, rng: Optional[np.random.Generator]) -> np.ndarray:
    """按模式抽取噪声: 确定性模式下为零"""
    if GateMode(mode) == GateMode.DETERMINISTIC:
        return np.zeros(shape)
    if rng is None:
        raise ConfigurationError("随机门控需要提供随机数生成器")
    return draw_gumbel(shape, rng)


def apply_gate(logits: np.ndarray, noise: np.ndarray, tau: float, mode: GateMode) -> GateResult:
    """在给定噪声下门控 (噪声预先抽取，便于批量计算时保持抽取顺序)"""
    _check_tau(tau)
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise InputError("门控 logits 含非有限值")
    noise = np.asarray(noise, dtype=np.float64)
    mode = GateMode(mode)

    relaxed = expit((logits + noise) / tau)
    grad_diag = relaxed * (1.0 - relaxed) / tau
    if mode == GateMode.RELAXED:
        mask = relaxed.copy()
    else:
        mask = (relaxed > 0.5).astype(np.float64)
    return GateResult(mask=mask, grad_diag=grad_diag, relaxed=relaxed, noise=noise)
