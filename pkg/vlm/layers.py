"""
通用层 - 由 numerics 原语组合而成的线性层、LoRA、多头注意力和 MLP
"""
import math
from typing import List, Optional

import numpy as np

from .numerics import (
    Tensor, add, concat_cols, gelu, matmul, scale, slice_cols, softmax_rows, transpose,
)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x·W (+ b)"""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def lora_linear(x: Tensor, w: Tensor, a: Optional[Tensor], b: Optional[Tensor], scaling: float) -> Tensor:
    """y = x·W + (alpha/r)·(x·A)·B；A 或 B 缺失时退化为 x·W"""
    y = matmul(x, w)
    if a is None or b is None:
        return y
    return add(y, scale(matmul(matmul(x, a), b), scaling))


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """两层 GELU MLP"""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def multi_head_attention(q_proj: Tensor, k_proj: Tensor, v_proj: Tensor,
                         w_o: Tensor, heads: int, mask: Optional[np.ndarray] = None,
                         scale_dim: Optional[int] = None,
                         record: Optional[List[np.ndarray]] = None) -> Tensor:
    """多头缩放点积注意力

    q_proj/k_proj/v_proj 是已经投影过的 Q、K、V（行为 token）。
    各头按列切分，拼接后乘 W_o。scale_dim 默认为每头维度。
    record 非空时追加形状为 (heads, Lq, Lk) 的注意力权重。
    """
    d = q_proj.shape[1]
    d_head = d // heads
    factor = 1.0 / math.sqrt(scale_dim or d_head)
    outputs = []
    weights = []
    for h in range(heads):
        lo, hi = h * d_head, (h + 1) * d_head
        q_h = slice_cols(q_proj, lo, hi)
        k_h = slice_cols(k_proj, lo, hi)
        v_h = slice_cols(v_proj, lo, hi)
        attn = softmax_rows(scale(matmul(q_h, transpose(k_h)), factor), mask)
        weights.append(attn.data)
        outputs.append(matmul(attn, v_h))
    if record is not None:
        record.append(np.stack(weights))
    merged = outputs[0] if heads == 1 else concat_cols(outputs)
    return matmul(merged, w_o)
