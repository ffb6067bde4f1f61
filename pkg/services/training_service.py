"""
训练服务
预测器预训练、离线参考计划预热、自迭代联合训练 (在线策略回放 + 联合梯度更新)，以及 Adam 优化器
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np

from services.evaluation_service import pooled_metrics
from services.inference_service import infer_dataset
from services.model_service import Predictor, ReactModels, init_models
from services.objective_service import MaskState, keep_upto, plugin_objective_batch, react_loss_batch
from storage.models import (
    CostSpec, DatasetManifest, Instance, ReferencePlan, TrainConfig, TrajectoryState,
)
from storage.store_manager import StoreManager
from utils.errors import InputError, TrainingError
from utils.gating import GateMode, apply_gate, draw_gate_noise
from utils.nn_core import ParamTensor, dropout_mask, mlp_backward, mlp_forward, softmax_cross_entropy

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    """训练阶段"""
    WARMUP = "warmup"
    SELF = "self"


# ============ 优化器 ============

@dataclass
class AdamState:
    """Adam 一阶/二阶矩与步数"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[ParamTensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.values) for p in params], v=[np.zeros_like(p.values) for p in params])


def optimizer_step(
    params: Sequence[ParamTensor],
    lr: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """使用 ParamTensor.grad 执行一步 Adam 更新 (原地修改 values 与 state)"""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, p in enumerate(params):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * p.grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * p.grad ** 2
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p.values -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamOptimizer:
    """按参数组设置学习率的 Adam"""

    def __init__(self, groups: Sequence[Tuple[Sequence[ParamTensor], float]]):
        self.groups = [(list(params), lr, AdamState.for_params(params)) for params, lr in groups]

    def zero_grad(self):
        for params, _, _ in self.groups:
            for p in params:
                p.zero_grad()

    def step(self):
        for params, lr, state in self.groups:
            optimizer_step(params, lr, state)


# ============ 预测器预训练 ============

def sample_subset_masks(n_rows: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """
    每行先均匀抽取子集大小 k ∈ {0..size}，再均匀抽取 k 元子集

    Returns:
        (n_rows, size) 的 0/1 矩阵
    """
    sizes = rng.integers(0, size + 1, size=n_rows)
    ranks = np.argsort(rng.random((n_rows, size)), axis=1).argsort(axis=1)
    return (ranks < sizes[:, None]).astype(np.float64)


def sample_pretrain_batch(
    instances: Sequence[Instance], rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    为每个 (实例, 目标时间 t') 组合抽取随机掩码

    背景: 子集大小均匀；每个可见时间行 (≤ t') 独立抽取子集，之后的行为零

    Returns:
        (掩码历史 (R,T,d), 掩码背景 (R,d_s), 目标时间 (R,), 标签 (R,))
    """
    T, d = instances[0].temporal.shape
    d_s = instances[0].context.shape[0]
    n = len(instances)
    X = np.repeat(np.stack([inst.temporal for inst in instances]), T, axis=0)
    S = np.repeat(np.stack([inst.context for inst in instances]), T, axis=0)
    targets = np.tile(np.arange(1, T + 1), n)
    labels = np.stack([inst.labels for inst in instances]).reshape(-1)

    rows = n * T
    context_masks = sample_subset_masks(rows, d_s, rng)
    temporal_masks = sample_subset_masks(rows * T, d, rng).reshape(rows, T, d)
    visible = (np.arange(T)[None, :] < targets[:, None])[:, :, None]
    return X * temporal_masks * visible, S * context_masks, targets, labels


@dataclass
class PretrainResult:
    """预训练结果: 验证集最优参数与每轮记录"""
    predictor: Predictor
    history: List[Dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = np.inf


def _predictor_loss(predictor: Predictor, batch) -> Tuple[float, float]:
    history, context, targets, labels = batch
    logits, _ = predictor.logits(predictor.build_inputs(history, context, targets))
    losses, _ = softmax_cross_entropy(logits, labels)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    return float(losses.mean()), accuracy


def pretrain_predictor(
    train: Sequence[Instance],
    val: Sequence[Instance],
    cfg: TrainConfig,
    predictor: Predictor,
) -> PretrainResult:
    """
    随机掩码 + dropout + 交叉熵预训练预测器，在验证集上早停

    Args:
        train: 训练实例
        val: 验证实例
        cfg: 训练配置 (lr_pretrain, dropout_rate, early_stop_patience, max_pretrain_epochs, batch_size)
        predictor: 待训练预测器 (原地更新后恢复为最优参数)

    Returns:
        PretrainResult
    """
    if not train or not val:
        raise InputError("预训练需要非空的训练集与验证集")
    rng = np.random.default_rng(cfg.seed)
    # 验证掩码只抽取一次，保证各轮可比
    val_batch = sample_pretrain_batch(val, np.random.default_rng(cfg.seed + 1))
    optimizer = AdamOptimizer([(predictor.params, cfg.lr_pretrain)])
    hidden = predictor.mlp.hidden_dims

    result = PretrainResult(predictor=predictor)
    best_values = [p.values.copy() for p in predictor.params]
    stale = 0
    for epoch in range(1, cfg.max_pretrain_epochs + 1):
        history, context, targets, labels = sample_pretrain_batch(train, rng)
        order = rng.permutation(labels.shape[0])
        train_losses = []
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            inputs = predictor.build_inputs(history[idx], context[idx], targets[idx])
            masks = [dropout_mask((idx.size, h), cfg.dropout_rate, rng) for h in hidden]
            optimizer.zero_grad()
            logits, tape = predictor.logits(inputs, masks)
            losses, grad = softmax_cross_entropy(logits, labels[idx])
            mlp_backward(tape, grad / idx.size)
            optimizer.step()
            train_losses.append(float(losses.mean()))

        val_loss, val_acc = _predictor_loss(predictor, val_batch)
        if not np.isfinite(val_loss):
            raise TrainingError(f"预训练第{epoch}轮验证损失非有限值")
        result.history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_loss": val_loss,
            "val_accuracy": val_acc,
        })
        logger.debug(f"预训练第{epoch}轮: 训练损失 {np.mean(train_losses):.4f}, 验证损失 {val_loss:.4f}")

        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_values = [p.values.copy() for p in predictor.params]
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                logger.info(f"预训练在第{epoch}轮早停 (最优轮次 {result.best_epoch})")
                break

    for p, values in zip(predictor.params, best_values):
        p.values[...] = values
        p.zero_grad()
    logger.info(f"预测器预训练完成: 最优验证损失 {result.best_val_loss:.4f} (第{result.best_epoch}轮)")
    return result


# ============ 离线参考计划 ============

@dataclass
class CandidatePool:
    """候选计划池"""
    m_s: np.ndarray    # (K, d_s)
    M: np.ndarray      # (K, T, d)

    def __len__(self) -> int:
        return self.m_s.shape[0]

    def __getitem__(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.m_s[k], self.M[k]


def _pool_from_bits(bits: np.ndarray, d_s: int, d: int, T: int) -> CandidatePool:
    bits = bits.astype(np.float64)
    return CandidatePool(m_s=bits[:, :d_s], M=bits[:, d_s:].reshape(-1, T, d))


def sample_candidate_plans(K: int, d_s: int, d: int, T: int, rng: np.random.Generator) -> CandidatePool:
    """K 个均匀随机计划，末尾追加全零与全一计划 (共 K+2 个)"""
    if K < 1:
        raise InputError("候选计划数 K 必须 ≥ 1")
    n_bits = d_s + T * d
    bits = rng.integers(0, 2, size=(K, n_bits))
    bits = np.vstack([bits, np.zeros((1, n_bits), dtype=bits.dtype), np.ones((1, n_bits), dtype=bits.dtype)])
    return _pool_from_bits(bits, d_s, d, T)


def enumerate_all_plans(d_s: int, d: int, T: int) -> CandidatePool:
    """穷举全部 2^{d_s+T·d} 个计划 (仅用于小规模校验)"""
    n_bits = d_s + T * d
    if n_bits > 20:
        raise InputError(f"计划空间 2^{n_bits} 过大，无法穷举")
    codes = np.arange(2 ** n_bits)[:, None]
    bits = (codes >> np.arange(n_bits)[None, :]) & 1
    return _pool_from_bits(bits, d_s, d, T)


def build_reference_set(
    train: Sequence[Instance],
    predictor: Predictor,
    lam: float,
    costs: CostSpec,
    K: int,
    rng: np.random.Generator,
    pool: Optional[CandidatePool] = None,
) -> List[ReferencePlan]:
    """
    为每个训练实例在候选池中选出 J_λ 最小的计划

    平局依次按总成本、候选下标取最小；pool 为空时每个实例单独抽取候选
    """
    references = []
    for index, instance in enumerate(train):
        T, d = instance.temporal.shape
        candidates = pool if pool is not None else sample_candidate_plans(K, instance.context.shape[0], d, T, rng)
        scores, plan_costs = plugin_objective_batch(candidates.m_s, candidates.M, instance, predictor, lam, costs)
        order = np.lexsort((np.arange(len(candidates)), plan_costs, scores))
        best = int(order[0])
        references.append(ReferencePlan(
            instance_id=instance.id,
            instance_index=index,
            m_s_star=candidates.m_s[best].copy(),
            M_star=candidates.M[best].copy(),
            score=float(scores[best]),
            cost=float(plan_costs[best]),
            candidate_index=best,
        ))
    logger.info(f"离线参考计划构建完成: {len(references)} 个实例, 平均成本 "
                f"{np.mean([r.cost for r in references]) if references else 0.0:.3f}")
    return references


def reference_states(reference: ReferencePlan) -> List[TrajectoryState]:
    """参考计划诱导的状态: M_prev_t = K_{≤t}(M*)，t = 0..T"""
    T = reference.M_star.shape[0]
    return [TrajectoryState(reference.instance_index, t, keep_upto(reference.M_star, t)) for t in range(T + 1)]


# ============ 在线策略回放 ============

@dataclass
class RolloutBatch:
    """回放得到的状态与每个实例的回放成本"""
    states: List[TrajectoryState]
    costs: List[float]


def rollout_batch(
    models: ReactModels,
    instances: Sequence[Instance],
    indices: Sequence[int],
    tau: float,
    rng: np.random.Generator,
    costs: Optional[CostSpec] = None,
) -> RolloutBatch:
    """
    对一批实例执行当前策略，收集 t = 0..T 的全部中间状态

    每个 t 查询规划器在当前历史上的输出并只门控第 t 行；零掩码行表示跳过该时间点
    """
    planner = models.planner
    T, d, d_s = planner.T, planner.d, planner.d_s
    B = len(indices)
    if costs is None:
        costs = CostSpec(c_s=np.ones(d_s), c_x=np.ones(d))
    X = np.stack([instances[i].temporal for i in indices])
    S = np.stack([instances[i].context for i in indices])

    ctx_noise = draw_gate_noise((B, d_s), GateMode.STOCHASTIC, rng)
    m_s = apply_gate(np.broadcast_to(models.selector.alpha.values, (B, d_s)), ctx_noise, tau, GateMode.STOCHASTIC).mask
    s_tilde = m_s * S
    history = np.zeros((B, T, d))
    M_prev = np.zeros((B, T, d))
    snapshots = [M_prev.copy()]
    for t in range(1, T + 1):
        inputs = planner.build_inputs(history, np.full(B, t), s_tilde)
        output, _ = mlp_forward(planner.mlp, planner.params, inputs)
        logits = output.reshape(B, T, d)[:, t - 1, :]
        noise = draw_gate_noise((B, d), GateMode.STOCHASTIC, rng)
        row = apply_gate(logits, noise, tau, GateMode.STOCHASTIC).mask
        history[:, t - 1] = row * X[:, t - 1]
        M_prev[:, t - 1] = row
        snapshots.append(M_prev.copy())

    states = [TrajectoryState(int(idx), t, snapshots[t][b]) for b, idx in enumerate(indices) for t in range(T + 1)]
    rollout_costs = (m_s @ costs.c_s + (M_prev @ costs.c_x).sum(axis=1)).tolist()
    return RolloutBatch(states=states, costs=rollout_costs)


def rollout_onpolicy(
    models: ReactModels,
    instance: Instance,
    tau: float,
    rng: np.random.Generator,
    instance_index: int = 0,
) -> List[TrajectoryState]:
    """单个实例的在线策略回放，返回 T+1 个状态"""
    instances = {instance_index: instance}
    return rollout_batch(models, instances, [instance_index], tau, rng).states


# ============ 联合训练 ============

@dataclass
class IterationResult:
    """单次迭代结果"""
    loss: float
    mean_rollout_cost: float
    n_states: int
    per_state_losses: np.ndarray


def train_iteration(
    batch: Sequence[int],
    instances: Sequence[Instance],
    models: ReactModels,
    cfg: TrainConfig,
    rng: np.random.Generator,
    phase: Phase,
    optimizer: AdamOptimizer,
    costs: Optional[CostSpec] = None,
    references: Optional[Dict[int, ReferencePlan]] = None,
) -> IterationResult:
    """
    一次迭代: 收集状态 → 对全部状态的 REACT 损失取均值 → 一步优化

    self 阶段的状态来自在线回放；warmup 阶段的状态来自参考计划
    """
    if len(batch) == 0:
        raise InputError("训练批量为空")
    phase = Phase(phase)
    optimizer.zero_grad()

    if phase == Phase.SELF:
        rollout = rollout_batch(models, instances, batch, cfg.tau, rng, costs)
        states, rollout_costs = rollout.states, rollout.costs
    else:
        if references is None:
            raise InputError("warmup 阶段需要参考计划")
        states, rollout_costs = [], []
        for idx in batch:
            reference = references[int(idx)]
            states.extend(reference_states(reference))
            rollout_costs.append(reference.cost)

    items = [(instances[s.instance_index], MaskState(s.M_prev, s.t)) for s in states]
    breakdown = react_loss_batch(models, items, cfg.lam, cfg.tau, rng, GateMode.STOCHASTIC,
                                 costs, scale=1.0 / len(items))
    loss = breakdown.mean
    if not np.isfinite(loss):
        raise TrainingError(
            f"迭代损失非有限值: phase={phase.value}, 预测损失均值={breakdown.prediction_loss.mean()}, "
            f"时间成本均值={breakdown.temporal_cost.mean()}"
        )
    optimizer.step()
    return IterationResult(loss=loss, mean_rollout_cost=float(np.mean(rollout_costs)),
                           n_states=len(items), per_state_losses=breakdown.per_item)


@dataclass
class TrainingResult:
    """训练结果: 最终模型与逐迭代指标日志"""
    models: ReactModels
    log: List[Dict] = field(default_factory=list)
    references: List[ReferencePlan] = field(default_factory=list)
    pretrain: Optional[PretrainResult] = None


class TrainingService:
    """训练服务: 组织预训练、参考计划与自迭代训练，并写出指标日志"""

    def __init__(self, store: Optional[StoreManager] = None):
        self.store = store or StoreManager()

    def pretrain(
        self,
        train: Sequence[Instance],
        val: Sequence[Instance],
        manifest: DatasetManifest,
        cfg: TrainConfig,
    ) -> Tuple[ReactModels, PretrainResult]:
        """初始化模型并预训练预测器"""
        models = init_models(manifest, cfg.seed, cfg.planner_hidden, cfg.predictor_hidden, cfg.time_embedding_dim)
        result = pretrain_predictor(train, val, cfg, models.predictor)
        return models, result

    def train(
        self,
        train: Sequence[Instance],
        val: Sequence[Instance],
        manifest: DatasetManifest,
        cfg: TrainConfig,
        models: Optional[ReactModels] = None,
        metrics_path=None,
    ) -> TrainingResult:
        """
        自迭代训练: 前 warmup_batches 批使用参考计划状态，其余使用在线回放状态

        Args:
            models: 已预训练的模型；为空时先执行预训练
            metrics_path: 指标日志 (JSON lines) 路径，可选

        Returns:
            TrainingResult
        """
        pretrain_result = None
        if models is None:
            models, pretrain_result = self.pretrain(train, val, manifest, cfg)
        result = TrainingResult(models=models, pretrain=pretrain_result)
        if cfg.total_batches == 0:
            logger.info("total_batches=0，直接返回预训练模型")
            return result
        if not train:
            raise InputError("训练集为空")

        costs = manifest.cost_spec()
        rng = np.random.default_rng(cfg.seed)
        references: Dict[int, ReferencePlan] = {}
        if cfg.warmup_batches > 0:
            result.references = build_reference_set(train, models.predictor, cfg.lam, costs, cfg.K_candidates, rng)
            references = {r.instance_index: r for r in result.references}

        logger.info(f"自迭代训练开始: 参考计划预热 {cfg.warmup_batches} 批, 在线回放 {cfg.self_batches} 批")
        optimizer = AdamOptimizer([
            (models.policy_params, cfg.lr_policy),
            (models.predictor.params, cfg.lr_predictor_joint),
        ])
        batch_size = min(cfg.batch_size, len(train))
        for iteration in range(1, cfg.total_batches + 1):
            phase = Phase.WARMUP if iteration <= cfg.warmup_batches else Phase.SELF
            batch = rng.choice(len(train), size=batch_size, replace=False)
            outcome = train_iteration(batch, train, models, cfg, rng, phase, optimizer, costs, references)

            entry = {
                "iteration": iteration,
                "phase": phase.value,
                "loss": outcome.loss,
                "rollout_cost": outcome.mean_rollout_cost,
                "val_auroc": None,
            }
            if iteration % cfg.eval_interval == 0 or iteration == cfg.total_batches:
                if val:
                    records, _ = infer_dataset(models, val, costs)
                    entry["val_auroc"], _ = pooled_metrics(records, val)
                logger.info(
                    f"迭代 {iteration}/{cfg.total_batches} [{phase.value}] 损失 {outcome.loss:.4f}, "
                    f"回放成本 {outcome.mean_rollout_cost:.3f}, 验证AUROC {entry['val_auroc']}"
                )
            result.log.append(entry)
            if metrics_path is not None:
                self.store.append_metrics(metrics_path, entry)
        return result
