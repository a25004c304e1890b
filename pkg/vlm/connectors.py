"""
连接器 - 把视觉 token 和探针投影到解码器嵌入空间

C: 逐帧 s×s 平均池化后接两层 GELU MLP
C_probe: 结构相同、参数独立的探针连接器
"""
from typing import Dict, Iterator, Tuple

import numpy as np

from config import ConnectorConfig
from .layers import mlp
from .numerics import DimensionError, Tensor, XorShiftRng, matmul, parameter, zeros


def pooling_matrix(frames: int, grid_side: int, s: int) -> np.ndarray:
    """(T·Ñ)×(T·N) 平均池化矩阵，帧优先、光栅顺序"""
    if s < 1 or grid_side % s:
        raise DimensionError(f"spatial_downsample: 网格边长 {grid_side} 不能被 s={s} 整除")
    pooled_side = grid_side // s
    n, n_pooled = grid_side ** 2, pooled_side ** 2
    pool = np.zeros((frames * n_pooled, frames * n))
    for t in range(frames):
        for r in range(grid_side):
            for c in range(grid_side):
                row = t * n_pooled + (r // s) * pooled_side + c // s
                pool[row, t * n + r * grid_side + c] = 1.0 / (s * s)
    return pool


def spatial_downsample(x: Tensor, frames: int, s: int) -> Tensor:
    """逐帧不重叠 s×s 平均池化"""
    if x.shape[0] % frames:
        raise DimensionError(f"spatial_downsample: {x.shape[0]} 行不能均分到 {frames} 帧")
    n = x.shape[0] // frames
    grid_side = int(round(np.sqrt(n)))
    if grid_side * grid_side != n:
        raise DimensionError(f"spatial_downsample: 每帧 {n} 个 token 不构成方形网格")
    if s == 1:
        return x
    return matmul(Tensor(pooling_matrix(frames, grid_side, s)), x)


class MlpConnector:
    """两层 GELU MLP 连接器"""

    def __init__(self, prefix: str, d_in: int, hidden: int, d_out: int, rng: XorShiftRng, std: float = 0.02):
        self.prefix = prefix
        self.params: Dict[str, Tensor] = {
            f"{prefix}.w1": parameter(rng, (d_in, hidden), std, f"{prefix}.w1"),
            f"{prefix}.b1": zeros((hidden,), f"{prefix}.b1"),
            f"{prefix}.w2": parameter(rng, (hidden, d_out), std, f"{prefix}.w2"),
            f"{prefix}.b2": zeros((d_out,), f"{prefix}.b2"),
        }

    def __call__(self, x: Tensor) -> Tensor:
        p = self.prefix
        if x.shape[1] != self.params[f"{p}.w1"].shape[0]:
            raise DimensionError(f"{p}: 输入 {x.shape} 与权重 {self.params[f'{p}.w1'].shape} 不匹配")
        return mlp(x, self.params[f"{p}.w1"], self.params[f"{p}.b1"],
                   self.params[f"{p}.w2"], self.params[f"{p}.b2"])

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.params.items()


def project_visual(pooled: Tensor, connector: MlpConnector) -> Tensor:
    """E = C(X^L)"""
    return connector(pooled)


def project_probes(probes: Tensor, probe_connector: MlpConnector) -> Tensor:
    """Z = C_probe(P^L)"""
    return probe_connector(probes)


def build_connectors(cfg: ConnectorConfig, d_v: int, d_lm: int, rng: XorShiftRng,
                     std: float = 0.02) -> Tuple[MlpConnector, MlpConnector]:
    """构建参数互不相交的 C 与 C_probe"""
    visual = MlpConnector("connector", d_v, cfg.hidden, d_lm, rng.spawn(1), std)
    probe = MlpConnector("probe_connector", d_v, cfg.hidden, d_lm, rng.spawn(2), std)
    return visual, probe
