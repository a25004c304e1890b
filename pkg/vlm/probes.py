"""
视觉探针 - 通过逐层交叉注意力从冻结编码器的中间激活中提取域特征

探针 P⁰ 依次经过放置在各编码器层的交互模块 Φ^ℓ：
    P^{ℓ+1} = P^ℓ + W_o · softmax((P W_q)(X W_k)ᵀ / √d_head)(X W_v)
"""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import ProbeConfig
from .encoder import LayerActivations, VisionEncoder
from .layers import multi_head_attention
from .numerics import DimensionError, Tensor, XorShiftRng, add, matmul, parameter, scale, slice_rows


@dataclass
class InteractionModule:
    """第 ℓ 层的探针-视觉交叉注意力 Φ^ℓ，参数独立"""
    layer: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    scope: str = "spatio-temporal"
    residual: bool = True
    scaling: str = "head"

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.heads:
            raise DimensionError(f"Φ^{self.layer}: d_v={d} 不能被 heads={self.heads} 整除")

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for proj in ("wq", "wk", "wv", "wo"):
            yield f"interaction.{self.layer}.{proj}", getattr(self, proj)

    def __call__(self, probes: Tensor, x: Tensor, frames: int,
                 record: Optional[List[np.ndarray]] = None) -> Tensor:
        return interaction_step(self, probes, x, frames, record)


def init_interaction(encoder: VisionEncoder, ell: int, cfg: Optional[ProbeConfig] = None) -> InteractionModule:
    """用编码器第 ℓ 层自注意力权重的深拷贝初始化 Φ^ℓ"""
    cfg = cfg or ProbeConfig()
    weights = encoder.layer_attention_weights(ell)
    copies = {
        proj: Tensor(w.data, requires_grad=True, name=f"interaction.{ell}.{proj}")
        for proj, w in weights.items()
    }
    return InteractionModule(layer=ell, heads=encoder.cfg.heads, scope=cfg.scope,
                             residual=cfg.residual, scaling=cfg.scaling, **copies)


def interaction_step(phi: InteractionModule, probes: Tensor, x: Tensor, frames: int,
                     record: Optional[List[np.ndarray]] = None) -> Tensor:
    """单层探针更新

    spatio-temporal: 探针注意全部 T·N 个 token。
    spatial: 每帧单独注意本帧 N 个 token，输出在帧间平均。
    record 非空时追加 (heads, M, T·N) 的注意力权重，每行和为 1。
    """
    d_v = phi.wq.shape[0]
    if probes.shape[1] != d_v or x.shape[1] != d_v:
        raise DimensionError(f"Φ^{phi.layer}: 探针 {probes.shape} / 激活 {x.shape} 与 d_v={d_v} 不匹配")
    if x.shape[0] % frames:
        raise DimensionError(f"Φ^{phi.layer}: {x.shape[0]} 个 token 不能均分到 {frames} 帧")
    scale_dim = d_v if phi.scaling == "model" else None
    q = matmul(probes, phi.wq)

    if phi.scope == "spatial" and frames > 1:
        per_frame = x.shape[0] // frames
        frame_weights: List[np.ndarray] = []
        total = None
        for t in range(frames):
            x_t = slice_rows(x, t * per_frame, (t + 1) * per_frame)
            out_t = multi_head_attention(q, matmul(x_t, phi.wk), matmul(x_t, phi.wv), phi.wo,
                                         phi.heads, scale_dim=scale_dim, record=frame_weights)
            total = out_t if total is None else add(total, out_t)
        attended = scale(total, 1.0 / frames)
        if record is not None:
            record.append(np.concatenate(frame_weights, axis=2) / frames)
    else:
        attended = multi_head_attention(q, matmul(x, phi.wk), matmul(x, phi.wv), phi.wo,
                                        phi.heads, scale_dim=scale_dim, record=record)
    return add(probes, attended) if phi.residual else attended


class ProbeBank:
    """M×d_v 可学习探针矩阵 P⁰，按 N(0, 0.02) 初始化"""

    def __init__(self, num_probes: int, d_v: int, rng: XorShiftRng, init_std: float = 0.02):
        if num_probes < 1:
            raise ValueError(f"探针数量必须 ≥ 1, 实际为 {num_probes}")
        self.probes = parameter(rng, (num_probes, d_v), init_std, "probes.p0")

    @property
    def num_probes(self) -> int:
        return self.probes.shape[0]

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield "probes.p0", self.probes


def run_probes(bank: ProbeBank, modules: Dict[int, InteractionModule], acts: LayerActivations,
               record: Optional[Dict[int, np.ndarray]] = None) -> Tensor:
    """探针按层号升序流经交互模块；没有模块的层不改变 P，返回 P^L"""
    for ell in modules:
        if not 1 <= ell <= len(acts):
            raise DimensionError(f"交互模块层号 {ell} 超出激活层数 {len(acts)}")
    p = bank.probes
    for ell in sorted(modules):
        weights: Optional[List[np.ndarray]] = [] if record is not None else None
        p = modules[ell](p, acts[ell], acts.frames, weights)
        if record is not None:
            record[ell] = weights[0]
    return p


class VisualProbing:
    """探针组 + 各层交互模块"""

    def __init__(self, bank: ProbeBank, modules: Dict[int, InteractionModule]):
        self.bank = bank
        self.modules = dict(sorted(modules.items()))

    @classmethod
    def from_encoder(cls, encoder: VisionEncoder, cfg: ProbeConfig, rng: XorShiftRng) -> "VisualProbing":
        bank = ProbeBank(cfg.num_probes, encoder.cfg.d_v, rng, cfg.init_std)
        modules = {ell: init_interaction(encoder, ell, cfg) for ell in cfg.layers_for(encoder.cfg.layers)}
        return cls(bank, modules)

    @property
    def placement(self) -> List[int]:
        return list(self.modules)

    def __call__(self, acts: LayerActivations, record: Optional[Dict[int, np.ndarray]] = None) -> Tensor:
        return run_probes(self.bank, self.modules, acts, record)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.bank.named_parameters()
        for module in self.modules.values():
            yield from module.named_parameters()
