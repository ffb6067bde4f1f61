"""
目标函数服务
成本核算、时间掩码算子、松弛的 REACT 损失及其反向传播、离线参考计划的插值目标
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple
import logging

import numpy as np

from services.model_service import Predictor, ReactModels
from storage.models import CostSpec, Instance
from utils.errors import InputError, TrainingError
from utils.gating import GateMode, apply_gate, draw_gate_noise
from utils.nn_core import mlp_backward, mlp_forward, softmax_cross_entropy

logger = logging.getLogger(__name__)


@dataclass
class MaskState:
    """观测状态: M_prev 为 T×d 比特网格，t 之后的行全为零"""
    M_prev: np.ndarray
    t: int

    def validate(self, T: int, d: int):
        grid = np.asarray(self.M_prev)
        if grid.shape != (T, d):
            raise InputError(f"M_prev 形状 {grid.shape} 应为 ({T}, {d})")
        if not 0 <= self.t <= T:
            raise InputError(f"t={self.t} 超出 [0, {T}]")
        if not np.all((grid == 0) | (grid == 1)):
            raise InputError("M_prev 只能包含 0/1")
        if np.any(grid[self.t:]):
            raise InputError(f"M_prev 在 t={self.t} 之后存在非零行")


@dataclass
class LossBreakdown:
    """损失分解 (逐项为未加权成本)"""
    per_item: np.ndarray
    prediction_loss: np.ndarray
    temporal_cost: np.ndarray
    context_cost: np.ndarray

    @property
    def total(self) -> float:
        return float(self.per_item.sum())

    @property
    def mean(self) -> float:
        return float(self.per_item.mean()) if self.per_item.size else 0.0


# ============ 成本与掩码算子 ============

def total_cost(m_s: np.ndarray, masks: Sequence[np.ndarray], costs: CostSpec) -> float:
    """总成本 c_sᵀm_s + Σ_t c_xᵀm_t"""
    m_s = np.asarray(m_s, dtype=np.float64)
    grid = np.asarray(masks, dtype=np.float64)
    if m_s.shape != costs.c_s.shape:
        raise InputError(f"背景掩码长度 {m_s.shape} 与成本 {costs.c_s.shape} 不一致")
    if grid.size and (grid.ndim != 2 or grid.shape[1] != costs.c_x.shape[0]):
        raise InputError(f"时间掩码形状 {grid.shape} 与成本长度 {costs.c_x.shape[0]} 不一致")
    temporal = float((grid @ costs.c_x).sum()) if grid.size else 0.0
    return float(costs.c_s @ m_s) + temporal


def _check_step(t: int, T: int):
    if not 0 <= t <= T:
        raise InputError(f"时间步 t={t} 超出 [0, {T}]")


def pad_to_T(v: np.ndarray, T: int) -> np.ndarray:
    """EX_T: 将 t×d 网格补零到 T×d"""
    v = np.asarray(v, dtype=np.float64)
    _check_step(v.shape[0], T)
    padded = np.zeros((T, v.shape[1]))
    padded[: v.shape[0]] = v
    return padded


def keep_after(v: np.ndarray, t: int) -> np.ndarray:
    """K_{>t}: 时间 1..t 的行置零"""
    v = np.array(v, dtype=np.float64)
    _check_step(t, v.shape[0])
    v[:t] = 0.0
    return v


def keep_upto(v: np.ndarray, t: int) -> np.ndarray:
    """K_{≤t}: 时间 t+1..T 的行置零"""
    v = np.array(v, dtype=np.float64)
    _check_step(t, v.shape[0])
    v[t:] = 0.0
    return v


# ============ REACT 损失 ============

def react_loss(
    models: ReactModels,
    instance: Instance,
    state: MaskState,
    lam: float,
    tau: float,
    rng: Optional[np.random.Generator],
    mode: GateMode = GateMode.STOCHASTIC,
    costs: Optional[CostSpec] = None,
    scale: float = 1.0,
) -> Tuple[float, LossBreakdown]:
    """
    单个 (实例, 状态) 的松弛损失，梯度累加到 α、θ、φ

    Returns:
        (loss, 分解)
    """
    breakdown = react_loss_batch(models, [(instance, state)], lam, tau, rng, mode, costs, scale)
    return breakdown.total, breakdown


def react_loss_batch(
    models: ReactModels,
    items: Sequence[Tuple[Instance, MaskState]],
    lam: float,
    tau: float,
    rng: Optional[np.random.Generator],
    mode: GateMode = GateMode.STOCHASTIC,
    costs: Optional[CostSpec] = None,
    scale: float = 1.0,
    accumulate: bool = True,
) -> LossBreakdown:
    """
    批量计算松弛损失

    对状态 t: P_{>t} = K_{>t}(G(π_θ(M_prev ⊙ x, t, s̃)))，M_{≤t'} = M_prev + K_{≤t'}(P_{>t})，
    损失 = Σ_{t'=t+1..T} CE(f_φ(M_{≤t'} ⊙ x, m̂_s ⊙ s, t'), y_{t'}) + λ·时间成本 + λ·c_sᵀm̂_s

    Args:
        items: (实例, 状态) 列表；噪声按列表顺序逐项抽取 (先背景后计划)
        costs: 缺省为单位成本
        scale: 梯度乘子 (求均值时传 1/|B|)
        accumulate: 是否执行反向传播

    Returns:
        LossBreakdown
    """
    if lam < 0:
        raise InputError(f"λ 必须非负, 实际为 {lam}")
    planner, predictor, selector = models.planner, models.predictor, models.selector
    T, d, d_s = planner.T, planner.d, planner.d_s
    if costs is None:
        costs = CostSpec(c_s=np.ones(d_s), c_x=np.ones(d))
    B = len(items)
    if B == 0:
        raise InputError("损失批量为空")

    # 逐项抽取噪声，保证与逐个计算一致
    ctx_masks, ctx_diags, plan_noise = [], [], []
    for instance, state in items:
        state.validate(T, d)
        ctx_noise = draw_gate_noise(d_s, mode, rng)
        ctx_gate = apply_gate(selector.alpha.values, ctx_noise, tau, mode)
        ctx_masks.append(ctx_gate.mask)
        ctx_diags.append(ctx_gate.grad_diag)
        plan_noise.append(draw_gate_noise((T, d), mode, rng))

    S = np.stack([inst.context for inst, _ in items])
    X = np.stack([inst.temporal for inst, _ in items])
    Y = np.stack([inst.labels for inst, _ in items])
    M_prev = np.stack([np.asarray(st.M_prev, dtype=np.float64) for _, st in items])
    steps = np.array([st.t for _, st in items])
    Ms = np.stack(ctx_masks)
    Ds = np.stack(ctx_diags)
    s_tilde = Ms * S

    # 规划器前向
    planner_in = planner.build_inputs(M_prev * X, steps, s_tilde)
    plan_logits, planner_tape = mlp_forward(planner.mlp, planner.params, planner_in)
    plan_gate = apply_gate(plan_logits.reshape(B, T, d), np.stack(plan_noise), tau, mode)
    rows = np.arange(T)
    future = (rows[None, :] >= steps[:, None])[:, :, None]
    P = plan_gate.mask * future

    # 预测项: 每个状态 t 对应 t' = t+1..T
    item_idx = np.concatenate([np.full(T - t, b) for b, t in enumerate(steps)]).astype(np.int64)
    target_t = np.concatenate([np.arange(t + 1, T + 1) for t in steps]).astype(np.int64)
    pred_losses = np.zeros(B)
    if item_idx.size:
        upto = (rows[None, :] < target_t[:, None])[:, :, None]
        M_le = M_prev[item_idx] + P[item_idx] * upto
        pred_in = predictor.build_inputs(M_le * X[item_idx], s_tilde[item_idx], target_t)
        logits, predictor_tape = predictor.logits(pred_in)
        losses, grad_logits = softmax_cross_entropy(logits, Y[item_idx, target_t - 1])
        np.add.at(pred_losses, item_idx, losses)

    temporal = (P * costs.c_x[None, None, :]).sum(axis=(1, 2))
    context = Ms @ costs.c_s
    per_item = pred_losses + lam * temporal + lam * context
    if not np.all(np.isfinite(per_item)):
        raise TrainingError(f"REACT 损失出现非有限值: {per_item[~np.isfinite(per_item)][:3]}")

    if accumulate:
        dS_tilde = np.zeros((B, d_s))
        dP = np.zeros((B, T, d))
        if item_idx.size:
            g_in = mlp_backward(predictor_tape, scale * grad_logits)
            g_hist = g_in[:, : T * d].reshape(-1, T, d)
            np.add.at(dP, item_idx, g_hist * X[item_idx] * upto)
            np.add.at(dS_tilde, item_idx, g_in[:, T * d: T * d + d_s])
        dP += scale * lam * costs.c_x[None, None, :]
        # K_{>t} 阻断过去行的梯度
        d_logits = dP * plan_gate.grad_diag * future
        g_plan_in = mlp_backward(planner_tape, d_logits.reshape(B, T * d))
        dS_tilde += g_plan_in[:, -d_s:]
        d_mask_s = dS_tilde * S + scale * lam * costs.c_s[None, :]
        selector.alpha.grad += (d_mask_s * Ds).sum(axis=0)

    return LossBreakdown(per_item=per_item, prediction_loss=pred_losses,
                         temporal_cost=temporal, context_cost=context)


# ============ 插值目标 (离线参考计划) ============

def plugin_objective_batch(
    m_s: np.ndarray,
    M: np.ndarray,
    instance: Instance,
    predictor: Predictor,
    lam: float,
    costs: CostSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    对 K 个候选计划批量计算 J_λ

    Args:
        m_s: (K, d_s) 背景掩码
        M: (K, T, d) 时间计划

    Returns:
        (J_λ 分数, 总成本)，长度均为 K
    """
    m_s = np.asarray(m_s, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    K, T, d = M.shape
    rows = np.arange(T)
    # H_t(M): 第 t 个预测只看到时间 ≤ t 的行
    visible = (rows[None, :] < np.arange(1, T + 1)[:, None]).astype(np.float64)   # (T_pred, T)
    masked = M * instance.temporal[None]                                          # (K, T, d)
    histories = masked[:, None, :, :] * visible[None, :, :, None]                 # (K, T_pred, T, d)
    s_tilde = np.repeat(m_s * instance.context[None], T, axis=0)
    targets = np.tile(np.arange(1, T + 1), K)
    inputs = predictor.build_inputs(histories.reshape(K * T, T * d), s_tilde, targets)
    logits, _ = predictor.logits(inputs)
    losses, _ = softmax_cross_entropy(logits, np.tile(instance.labels, K))
    prediction = losses.reshape(K, T).sum(axis=1)
    cost = m_s @ costs.c_s + (M @ costs.c_x).sum(axis=1)
    return prediction + lam * cost, cost


def plugin_objective(
    m_s: np.ndarray,
    M: np.ndarray,
    instance: Instance,
    predictor: Predictor,
    lam: float,
    costs: CostSpec,
) -> float:
    """插值目标 J_λ(m_s, M)"""
    scores, _ = plugin_objective_batch(np.asarray(m_s)[None], np.asarray(M)[None], instance, predictor, lam, costs)
    return float(scores[0])
