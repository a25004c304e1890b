"""
数值计算核心 - 带反向模式自动微分的稠密张量

所有矩阵（编码器激活、探针、连接器输出、权重）都是 Tensor。
运算在活动的 GradTape 上记录，backward 逆序回放磁带。
没有活动磁带时运算不记录，结果是可在线程间共享的不可变值。
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np


class DimensionError(ValueError):
    """形状不匹配"""


class NumericError(ArithmeticError):
    """数值错误（NaN、奇异矩阵等）"""


class ContractError(RuntimeError):
    """调用约定被违反"""


class DegenerateBatchError(ValueError):
    """批次中没有可计算损失的位置"""


ArrayLike = Union[np.ndarray, Sequence, float, int]


class Tensor:
    """稠密 float64 张量，参与梯度磁带

    requires_grad=False 的张量永远不会分配 grad。
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        # 运算输出在记录时被标记
        self._tracked = False
        self._tape: Optional["GradTape"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() 需要单元素张量, 实际形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"


@dataclass
class _Node:
    """磁带上的一条记录"""
    out: Tensor
    inputs: Tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
    op: str


_TAPE_STACK: List["GradTape"] = []


def current_tape() -> Optional["GradTape"]:
    """当前活动磁带"""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class GradTape:
    """梯度磁带 - 按执行顺序记录原语运算"""

    def __init__(self):
        self.nodes: List[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.remove(self)
        return False

    def record(self, node: _Node):
        self.nodes.append(node)

    def clear(self):
        """清空磁带，释放中间结果"""
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()

    def backward(self, loss: Tensor):
        """逆序回放磁带，为所有可达的 requires_grad=True 张量填充梯度"""
        if loss.data.size != 1:
            raise ContractError(f"backward 需要标量损失, 实际形状 {loss.shape}")
        if loss._tape is not self:
            raise ContractError("损失不是由当前磁带产生的")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}

        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not (inp.requires_grad or inp._tracked):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp.requires_grad and not inp._tracked:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor):
    """对标量损失执行反向传播"""
    if loss.data.size != 1:
        raise ContractError(f"backward 需要标量损失, 实际形状 {loss.shape}")
    if loss._tape is None:
        raise ContractError("损失不在活动磁带上，无法反向传播")
    loss._tape.backward(loss)


@contextmanager
def no_tape() -> Iterator[None]:
    """临时关闭记录（评估路径）"""
    saved = list(_TAPE_STACK)
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


def _result(data: np.ndarray, inputs: Sequence[Tensor],
            backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
            op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._tracked = False
    out._tape = None
    tape = current_tape()
    if tape is not None and any(t.requires_grad or t._tracked for t in inputs):
        out._tracked = True
        out._tape = tape
        tape.record(_Node(out=out, inputs=tuple(inputs), backward=backward_fn, op=op))
    return out


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_2d(op: str, *tensors: Tensor):
    for t in tensors:
        if t.data.ndim != 2:
            raise DimensionError(f"{op}: 需要二维张量, 实际形状 {t.shape}")


# ---------------------------------------------------------------------------
# 原语运算
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """矩阵乘法 c = a·b"""
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: 内维不匹配 {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def _backward(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), _backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """逐元素加法；b 为一维时沿最后一维广播（偏置）"""
    if a.shape == b.shape:
        def _backward(g):
            return g, g
        return _result(a.data + b.data, (a, b), _backward, "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))

        def _backward_bias(g):
            return g, g.sum(axis=lead)
        return _result(a.data + b.data, (a, b), _backward_bias, "add_bias")
    raise DimensionError(f"add: 形状不兼容 {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: 形状不兼容 {a.shape} - {b.shape}")

    def _backward(g):
        return g, -g
    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """逐元素乘法"""
    if a.shape != b.shape:
        raise DimensionError(f"mul: 形状不兼容 {a.shape} * {b.shape}")
    av, bv = a.data, b.data

    def _backward(g):
        return g * bv, g * av
    return _result(av * bv, (a, b), _backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def _backward(g):
        return (g * c,)
    return _result(a.data * c, (a,), _backward, "scale")


def transpose(a: Tensor) -> Tensor:
    _require_2d("transpose", a)

    def _backward(g):
        return (g.T,)
    return _result(a.data.T.copy(), (a,), _backward, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: {a.shape} 无法变为 {shape}")
    original = a.shape

    def _backward(g):
        return (g.reshape(original),)
    return _result(a.data.reshape(shape).copy(), (a,), _backward, "reshape")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """沿第 0 维拼接"""
    tensors = [t for t in tensors if t.shape[0] > 0]
    if not tensors:
        raise DimensionError("concat_rows: 没有非空输入")
    width = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != width:
            raise DimensionError(f"concat_rows: 列形状不一致 {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def _backward(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
    return _result(np.concatenate([t.data for t in tensors], axis=0), tensors, _backward, "concat_rows")


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """沿第 1 维拼接"""
    _require_2d("concat_cols", *tensors)
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != rows:
            raise DimensionError(f"concat_cols: 行数不一致 {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))
    return _result(np.concatenate([t.data for t in tensors], axis=1), tensors, _backward, "concat_cols")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] 超出 {a.shape}")
    shape = a.shape

    def _backward(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)
    return _result(a.data[start:stop].copy(), (a,), _backward, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _require_2d("slice_cols", a)
    if not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] 超出 {a.shape}")
    shape = a.shape

    def _backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)
    return _result(a.data[:, start:stop].copy(), (a,), _backward, "slice_cols")


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """按行索引取嵌入"""
    _require_2d("gather_rows", table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"gather_rows: 索引超出 {table.shape[0]} 行")
    shape = table.shape

    def _backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)
    return _result(table.data[idx].copy(), (table,), _backward, "gather_rows")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def _backward(g):
        return (np.full(shape, float(g)),)
    return _result(np.array(a.data.sum()), (a,), _backward, "sum_all")


def mean_rows(a: Tensor) -> Tensor:
    """沿行取平均，输出 1×d"""
    _require_2d("mean_rows", a)
    n = a.shape[0]

    def _backward(g):
        return (np.repeat(g, n, axis=0) / n,)
    return _result(a.data.mean(axis=0, keepdims=True), (a,), _backward, "mean_rows")


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """逐行 softmax，减去行最大值保证数值稳定

    mask 为布尔数组，False 位置的概率强制为 0；每行至少保留一个位置。
    """
    _require_2d("softmax_rows", x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: 输入包含 NaN")
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax_rows: 掩码形状 {mask.shape} 与输入 {x.shape} 不一致")
        if not mask.any(axis=1).all():
            raise ContractError("softmax_rows: 存在全部被屏蔽的行")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    return _result(y, (x,), _backward, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """沿最后一维做层归一化"""
    if eps <= 0:
        raise ContractError("layer_norm: eps 必须为正")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: 输入 {x.shape} 与 gain {gain.shape}/bias {bias.shape} 不匹配")
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    var = ((xv - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gain.data
    lead = tuple(range(xv.ndim - 1))

    def _backward(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return _result(xhat * gv + bias.data, (x, gain, bias), _backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU（tanh 近似）"""
    xv = x.data
    inner = _GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)

    def _backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * dinner),)
    return _result(0.5 * xv * (1.0 + t), (x,), _backward, "gelu")


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_mask: Optional[Sequence[bool]] = None) -> Tensor:
    """未屏蔽位置上的平均负对数似然

    ignore_mask[i] 为 True 表示位置 i 不计入损失。
    """
    _require_2d("cross_entropy", logits)
    length, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (length,):
        raise DimensionError(f"cross_entropy: targets 长度 {tgt.shape} 与 logits {logits.shape} 不匹配")
    ignore = np.zeros(length, dtype=bool) if ignore_mask is None else np.asarray(ignore_mask, dtype=bool)
    keep = ~ignore
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("cross_entropy: 所有位置都被屏蔽")
    if (tgt[keep] < 0).any() or (tgt[keep] >= vocab).any():
        raise DimensionError(f"cross_entropy: 目标 id 超出词表大小 {vocab}")
    safe_tgt = np.where(keep, tgt, 0)
    lv = logits.data
    m = lv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lv - m).sum(axis=1))
    nll = lse - lv[np.arange(length), safe_tgt]
    loss = float((nll * keep).sum() / count)

    def _backward(g):
        probs = np.exp(lv - lse[:, None])
        probs[np.arange(length), safe_tgt] -= 1.0
        probs *= keep[:, None] / count
        return (probs * float(g),)
    return _result(np.array(loss), (logits,), _backward, "cross_entropy")


# ---------------------------------------------------------------------------
# 随机数：xorshift64* 多通道生成器
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(state: int) -> Tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class XorShiftRng:
    """xorshift64* 随机数发生器

    各通道状态由 splitmix64 从种子展开，每轮并行推进所有通道，
    输出序列只由种子决定。
    """

    LANES = 64
    _MULT = np.uint64(0x2545F4914F6CDD1D)

    def __init__(self, seed: int):
        self.seed = int(seed)
        state = self.seed & _MASK64
        lanes = []
        for _ in range(self.LANES):
            state, z = _splitmix64(state)
            lanes.append(z or 0x1)
        self._state = np.array(lanes, dtype=np.uint64)
        self._buffer = np.empty(0, dtype=np.uint64)

    def _advance(self) -> np.ndarray:
        x = self._state
        with np.errstate(over="ignore"):
            x = x ^ (x >> np.uint64(12))
            x = x ^ (x << np.uint64(25))
            x = x ^ (x >> np.uint64(27))
            self._state = x
            return x * self._MULT

    def bits(self, n: int) -> np.ndarray:
        while self._buffer.size < n:
            self._buffer = np.concatenate([self._buffer, self._advance()])
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def uniform(self, shape: Union[int, Sequence[int]] = ()) -> np.ndarray:
        """[0, 1) 均匀分布"""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape: Union[int, Sequence[int]], std: float = 1.0) -> np.ndarray:
        """Box-Muller 正态分布"""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape))
        half = (n + 1) // 2
        u1 = 1.0 - self.uniform(half)
        u2 = self.uniform(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return (z * std).reshape(shape)

    def integers(self, low: int, high: int, size: Optional[int] = None):
        """[low, high) 均匀整数"""
        if high <= low:
            raise ValueError(f"integers: 空区间 [{low}, {high})")
        if size is None:
            return int(low + math.floor(float(self.uniform()) * (high - low)))
        return (low + np.floor(self.uniform(size) * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, items: Sequence):
        return items[self.integers(0, len(items))]

    def spawn(self, tag: int) -> "XorShiftRng":
        """派生独立子发生器"""
        _, z = _splitmix64((self.seed * 0x100000001B3 + tag) & _MASK64)
        return XorShiftRng(z)


def parameter(rng: XorShiftRng, shape: Sequence[int], std: float, name: str) -> Tensor:
    """正态初始化的可训练参数"""
    return Tensor(rng.normal(shape, std=std), requires_grad=True, name=name)


def zeros(shape: Sequence[int], name: Optional[str] = None, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name)


def ones(shape: Sequence[int], name: Optional[str] = None, requires_grad: bool = True) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# 梯度检查
# ---------------------------------------------------------------------------

def numeric_gradient(loss_fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5,
                     indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """中心差分数值梯度

    loss_fn 在无磁带状态下求值；indices 为 None 时遍历所有元素，
    否则只计算给定位置，其余位置为 0。
    """
    grad = np.zeros_like(target.data)
    positions = indices if indices is not None else list(np.ndindex(*target.shape))
    with no_tape():
        for pos in positions:
            original = target.data[pos]
            target.data[pos] = original + h
            plus = loss_fn().item()
            target.data[pos] = original - h
            minus = loss_fn().item()
            target.data[pos] = original
            grad[pos] = (plus - minus) / (2 * h)
    return grad


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> List[Optional[np.ndarray]]:
    """在新磁带上求值并反向传播，返回各参数梯度"""
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
        tape.backward(loss)
        tape.clear()
    return [None if p.grad is None else p.grad.copy() for p in params]
