"""
神经网络数值基础
全连接层、ReLU、交叉熵、时间嵌入、Dropout，全部带显式前向/反向传播
所有运算均使用双精度
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union
import logging

import numpy as np
from scipy.special import logsumexp

from utils.errors import ConfigurationError, InputError, OracleError

logger = logging.getLogger(__name__)

# 有限差分校验中相对误差分母的下限
_GRAD_FLOOR = 1e-6


@dataclass
class ParamTensor:
    """可学习参数及其同形状的梯度累加器"""
    values: np.ndarray
    grad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad = np.ascontiguousarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.values.shape:
            raise ConfigurationError(
                f"参数 {self.name} 的梯度形状 {self.grad.shape} 与取值形状 {self.values.shape} 不一致"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        """梯度清零"""
        self.grad.fill(0.0)

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.values.copy(), self.grad.copy(), self.name)


@dataclass
class MlpSpec:
    """多层感知机结构描述"""
    input_dim: int
    hidden_dims: List[int]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.validate()

    def validate(self):
        if not self.hidden_dims:
            raise ConfigurationError("hidden_dims 不能为空")
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(int(d) < 1 for d in dims):
            raise ConfigurationError(f"所有层维度必须 ≥ 1, 实际为 {dims}")
        if self.activation != "relu":
            raise ConfigurationError(f"不支持的激活函数: {self.activation}")

    def layer_shapes(self) -> List[Tuple[int, int]]:
        """每个全连接层的权重形状 (输出, 输入)"""
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def parameter_count(self) -> int:
        """参数总数: Σ (out·in + out)"""
        return sum(out * inp + out for out, inp in self.layer_shapes())

    def to_json(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, data: dict) -> "MlpSpec":
        return cls(**data)


@dataclass
class MlpTape:
    """前向传播记录，足以计算任意标量函数对参数和输入的精确梯度"""
    spec: MlpSpec
    params: List[ParamTensor]
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    dropout_masks: List[Optional[np.ndarray]] = field(default_factory=list)
    squeezed: bool = False


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> List[ParamTensor]:
    """
    He-uniform 初始化权重，偏置置零

    Returns:
        [W1, b1, W2, b2, ...]，W 形状为 (输出, 输入)
    """
    params = []
    for i, (out_dim, in_dim) in enumerate(spec.layer_shapes()):
        limit = np.sqrt(6.0 / in_dim)
        weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        params.append(ParamTensor(weight, name=f"{prefix}W{i + 1}"))
        params.append(ParamTensor(np.zeros(out_dim), name=f"{prefix}b{i + 1}"))
    return params


def _check_params(spec: MlpSpec, params: Sequence[ParamTensor]):
    shapes = spec.layer_shapes()
    if len(params) != 2 * len(shapes):
        raise ConfigurationError(f"参数个数 {len(params)} 与网络结构不匹配 (应为 {2 * len(shapes)})")
    for i, (out_dim, in_dim) in enumerate(shapes):
        weight, bias = params[2 * i], params[2 * i + 1]
        if weight.shape != (out_dim, in_dim) or bias.shape != (out_dim,):
            raise ConfigurationError(
                f"第{i + 1}层参数形状 {weight.shape}/{bias.shape} 与结构 ({out_dim}, {in_dim}) 不匹配"
            )


def mlp_forward(
    spec: MlpSpec,
    params: Sequence[ParamTensor],
    inputs: np.ndarray,
    dropout_masks: Optional[Sequence[np.ndarray]] = None,
) -> Tuple[np.ndarray, MlpTape]:
    """
    MLP 前向传播

    Args:
        spec: 网络结构
        params: [W1, b1, ...]
        inputs: 长度为 input_dim 的向量，或 (n, input_dim) 的批量矩阵
        dropout_masks: 每个隐藏层一个掩码 (乘在ReLU之后)，仅预训练时使用

    Returns:
        (输出, 记录带)
    """
    _check_params(spec, params)
    x = np.asarray(inputs, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ConfigurationError(f"输入维度 {np.shape(inputs)} 与 input_dim={spec.input_dim} 不匹配")
    n_hidden = len(spec.hidden_dims)
    if dropout_masks is not None and len(dropout_masks) != n_hidden:
        raise ConfigurationError(f"dropout 掩码个数应为 {n_hidden}")

    tape = MlpTape(spec=spec, params=list(params), squeezed=squeezed)
    activation = x
    for layer in range(n_hidden + 1):
        weight, bias = params[2 * layer].values, params[2 * layer + 1].values
        tape.layer_inputs.append(activation)
        z = activation @ weight.T + bias
        if layer == n_hidden:
            activation = z
            break
        tape.pre_activations.append(z)
        activation = np.maximum(z, 0.0)
        mask = None if dropout_masks is None else np.asarray(dropout_masks[layer], dtype=np.float64)
        if mask is not None:
            activation = activation * mask
        tape.dropout_masks.append(mask)

    output = activation[0] if squeezed else activation
    return output, tape


def mlp_backward(tape: MlpTape, upstream_grad: np.ndarray) -> np.ndarray:
    """
    MLP 反向传播，梯度以 += 方式累加到各 ParamTensor.grad

    Returns:
        对输入的梯度 (形状与前向输入一致)
    """
    grad = np.asarray(upstream_grad, dtype=np.float64)
    if tape.squeezed:
        grad = grad[None, :]
    expected = (tape.layer_inputs[0].shape[0], tape.spec.output_dim)
    if grad.shape != expected:
        raise ConfigurationError(f"上游梯度形状 {grad.shape} 与前向输出 {expected} 不一致")

    n_hidden = len(tape.spec.hidden_dims)
    for layer in range(n_hidden, -1, -1):
        weight, bias = tape.params[2 * layer], tape.params[2 * layer + 1]
        layer_input = tape.layer_inputs[layer]
        weight.grad += grad.T @ layer_input
        bias.grad += grad.sum(axis=0)
        grad = grad @ weight.values
        if layer > 0:
            mask = tape.dropout_masks[layer - 1]
            if mask is not None:
                grad = grad * mask
            # ReLU 在 z ≤ 0 处梯度为 0
            grad = grad * (tape.pre_activations[layer - 1] > 0.0)

    return grad[0] if tape.squeezed else grad


def softmax(logits: np.ndarray) -> np.ndarray:
    """数值稳定的 softmax (按最后一维)"""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return np.exp(shifted - logsumexp(shifted, axis=-1, keepdims=True))


def softmax_cross_entropy(
    logits: np.ndarray, label: Union[int, np.ndarray]
) -> Tuple[Union[float, np.ndarray], np.ndarray]:
    """
    Softmax 交叉熵及其对 logits 的梯度

    Args:
        logits: 长度 C 的向量，或 (n, C) 矩阵
        label: 类别下标，或长度 n 的下标数组

    Returns:
        (loss, grad_logits)；批量输入时 loss 为逐行损失数组
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    labels = np.atleast_1d(np.asarray(label))
    n_classes = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise InputError(f"标签个数 {labels.shape[0]} 与 logits 行数 {z.shape[0]} 不一致")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise InputError(f"label out of range: 标签必须位于 [0, {n_classes})")
    if not np.all(np.isfinite(z)):
        raise InputError("logits 含非有限值")

    labels = labels.astype(np.int64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - logsumexp(shifted, axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    losses = -log_probs[rows, labels]
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0

    if single:
        return float(losses[0]), grad[0]
    return losses, grad


def sinusoidal_time_embedding(t: int, T: int, D: int) -> np.ndarray:
    """
    正弦时间嵌入: 第 2i 项为 sin(t / 10000^{2i/D})，第 2i+1 项为 cos(同)
    """
    if D <= 0 or D % 2 != 0:
        raise ConfigurationError(f"时间嵌入维度必须为正偶数, 实际为 {D}")
    if not 0 <= t <= T:
        raise InputError(f"时间步 t={t} 超出 [0, {T}]")
    half = np.arange(D // 2, dtype=np.float64)
    angles = t / np.power(10000.0, 2.0 * half / D)
    embedding = np.empty(D, dtype=np.float64)
    embedding[0::2] = np.sin(angles)
    embedding[1::2] = np.cos(angles)
    return embedding


def dropout_mask(dim: Union[int, Tuple[int, ...]], rate: float, rng: np.random.Generator) -> np.ndarray:
    """反向 dropout 掩码: 以概率 rate 置 0，其余为 1/(1-rate)"""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout 比例必须位于 [0, 1), 实际为 {rate}")
    if rate == 0.0:
        return np.ones(dim, dtype=np.float64)
    keep = rng.random(dim) >= rate
    return keep / (1.0 - rate)


def zero_grads(params: Sequence[ParamTensor]):
    for p in params:
        p.zero_grad()


def finite_difference_check(
    loss_fn: Callable[[Sequence[ParamTensor]], float],
    params: Sequence[ParamTensor],
    eps: float = 1e-5,
) -> float:
    """
    用中心差分校验解析梯度

    Args:
        loss_fn: 计算标量损失并把解析梯度累加进 params 的函数
        params: 待校验参数
        eps: 差分步长

    Returns:
        所有参数分量中最大的相对误差
    """
    if eps <= 0:
        raise ConfigurationError("eps 必须为正")
    zero_grads(params)
    base = loss_fn(params)
    if not np.isfinite(base):
        raise OracleError(f"损失非有限值: {base}")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.values.reshape(-1)
        flat_grad = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            loss_plus = loss_fn(params)
            flat[i] = original - eps
            loss_minus = loss_fn(params)
            flat[i] = original
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                raise OracleError(f"参数 {p.name}[{i}] 扰动后损失非有限值")
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            denom = max(abs(flat_grad[i]), abs(numeric), _GRAD_FLOOR)
            worst = max(worst, abs(flat_grad[i] - numeric) / denom)

    # 恢复解析梯度，丢弃扰动过程中累加的部分
    for p, grad in zip(params, analytic):
        p.grad[...] = grad
    logger.debug(f"有限差分校验完成, 最大相对误差 {worst:.3e}")
    return worst
