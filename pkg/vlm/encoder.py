"""
视觉编码器 - 逐帧处理的小型 patch ViT，暴露每一层的 token 序列 X^ℓ
"""
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from config import EncoderConfig
from .layers import linear, lora_linear, mlp, multi_head_attention
from .numerics import (
    DimensionError, Tensor, XorShiftRng, add, concat_rows, layer_norm, ones, parameter, zeros,
)


@dataclass
class LayerActivations:
    """各层输出 X^1..X^L，每个形状为 (T·N)×d_v，帧按时间拼接"""
    layers: List[Tensor]
    frames: int
    tokens_per_frame: int

    def __post_init__(self):
        shapes = {t.shape for t in self.layers}
        if len(shapes) > 1:
            raise DimensionError(f"LayerActivations: 各层形状不一致 {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, ell: int) -> Tensor:
        """按 1 起始的层号取激活"""
        if not 1 <= ell <= len(self.layers):
            raise IndexError(f"层号 {ell} 超出 1..{len(self.layers)}")
        return self.layers[ell - 1]

    @property
    def last(self) -> Tensor:
        return self.layers[-1]


def patchify(frames: np.ndarray, cfg: EncoderConfig) -> Tensor:
    """把 T×C×H×W 视频切成不重叠 patch，帧优先、帧内光栅顺序"""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise DimensionError(f"patchify: 需要 T×C×H×W, 实际形状 {frames.shape}")
    t, c, h, w = frames.shape
    if c != cfg.channels or h != cfg.image_side or w != cfg.image_side:
        raise DimensionError(
            f"patchify: 帧形状 {frames.shape[1:]} 与配置 "
            f"({cfg.channels}, {cfg.image_side}, {cfg.image_side}) 不一致")
    g, p = cfg.grid_side, cfg.patch_side
    rows = frames.reshape(t, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(t * g * g, c * p * p)
    return Tensor(rows)


def frame_block_mask(frames: int, tokens_per_frame: int) -> np.ndarray:
    """块对角掩码：只允许同一帧内的 token 互相注意"""
    ids = np.repeat(np.arange(frames), tokens_per_frame)
    return ids[:, None] == ids[None, :]


def init_encoder_params(cfg: EncoderConfig, rng: XorShiftRng) -> Dict[str, Tensor]:
    """按配置初始化编码器参数，层号从 1 开始"""
    d, hidden, std = cfg.d_v, cfg.mlp_hidden, cfg.init_std
    params: Dict[str, Tensor] = {
        "patch.w": parameter(rng, (cfg.patch_dim, d), std, "patch.w"),
        "patch.b": zeros((d,), "patch.b"),
        "pos": parameter(rng, (cfg.n_patches, d), std, "pos"),
    }
    for ell in range(1, cfg.layers + 1):
        pre = f"layers.{ell}"
        params[f"{pre}.ln1.g"] = ones((d,), f"{pre}.ln1.g")
        params[f"{pre}.ln1.b"] = zeros((d,), f"{pre}.ln1.b")
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{pre}.attn.{proj}"] = parameter(rng, (d, d), std, f"{pre}.attn.{proj}")
        params[f"{pre}.ln2.g"] = ones((d,), f"{pre}.ln2.g")
        params[f"{pre}.ln2.b"] = zeros((d,), f"{pre}.ln2.b")
        params[f"{pre}.mlp.w1"] = parameter(rng, (d, hidden), std, f"{pre}.mlp.w1")
        params[f"{pre}.mlp.b1"] = zeros((hidden,), f"{pre}.mlp.b1")
        params[f"{pre}.mlp.w2"] = parameter(rng, (hidden, d), std, f"{pre}.mlp.w2")
        params[f"{pre}.mlp.b2"] = zeros((d,), f"{pre}.mlp.b2")
    if cfg.lora_rank > 0:
        r = cfg.lora_rank
        for ell in range(1, cfg.layers + 1):
            for target in ("q", "v"):
                pre = f"lora.{ell}.{target}"
                params[f"{pre}.a"] = parameter(rng, (d, r), std, f"{pre}.a")
                params[f"{pre}.b"] = zeros((r, d), f"{pre}.b")
    return params


def _encoder_block(cfg: EncoderConfig, params: Dict[str, Tensor], ell: int, x: Tensor,
                   mask: np.ndarray, record: Optional[List[np.ndarray]]) -> Tensor:
    pre = f"layers.{ell}"
    scaling = cfg.lora_alpha / cfg.lora_rank if cfg.lora_rank > 0 else 0.0
    h = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"], cfg.ln_eps)
    q = lora_linear(h, params[f"{pre}.attn.wq"], params.get(f"lora.{ell}.q.a"),
                    params.get(f"lora.{ell}.q.b"), scaling)
    k = linear(h, params[f"{pre}.attn.wk"])
    v = lora_linear(h, params[f"{pre}.attn.wv"], params.get(f"lora.{ell}.v.a"),
                    params.get(f"lora.{ell}.v.b"), scaling)
    x = add(x, multi_head_attention(q, k, v, params[f"{pre}.attn.wo"], cfg.heads,
                                    mask=mask, record=record))
    h = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"], cfg.ln_eps)
    return add(x, mlp(h, params[f"{pre}.mlp.w1"], params[f"{pre}.mlp.b1"],
                      params[f"{pre}.mlp.w2"], params[f"{pre}.mlp.b2"]))


def encode(frames: np.ndarray, cfg: EncoderConfig, params: Dict[str, Tensor],
           record: Optional[List[np.ndarray]] = None) -> LayerActivations:
    """编码视频，返回全部 L 层输出

    自注意力只在同一帧的 N 个 token 之间进行；位置嵌入按 patch 序号在帧间共享。
    record 非空时按层追加注意力权重 (heads, T·N, T·N)。
    """
    tokens = patchify(frames, cfg)
    t = tokens.shape[0] // cfg.n_patches
    x = linear(tokens, params["patch.w"], params["patch.b"])
    x = add(x, concat_rows([params["pos"]] * t))
    mask = frame_block_mask(t, cfg.n_patches)
    outputs = []
    for ell in range(1, cfg.layers + 1):
        x = _encoder_block(cfg, params, ell, x, mask, record)
        outputs.append(x)
    return LayerActivations(layers=outputs, frames=t, tokens_per_frame=cfg.n_patches)


def frame_attention(weights: np.ndarray, frame: int, tokens_per_frame: int) -> np.ndarray:
    """取出某一帧内的注意力块并对头平均，得到 N×N 行随机矩阵"""
    lo, hi = frame * tokens_per_frame, (frame + 1) * tokens_per_frame
    return weights[:, lo:hi, lo:hi].mean(axis=0)


class VisionEncoder:
    """视觉编码器：配置 + 命名参数"""

    def __init__(self, cfg: EncoderConfig, rng: Optional[XorShiftRng] = None,
                 params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_encoder_params(cfg, rng or XorShiftRng(0))

    def __call__(self, frames: np.ndarray, record: Optional[List[np.ndarray]] = None) -> LayerActivations:
        return encode(frames, self.cfg, self.params, record)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.params.items()

    def layer_attention_weights(self, ell: int) -> Dict[str, Tensor]:
        """第 ℓ 层自注意力的 W_q/W_k/W_v/W_o"""
        if not 1 <= ell <= self.cfg.layers:
            raise IndexError(f"编码器没有第 {ell} 层 (共 {self.cfg.layers} 层)")
        pre = f"layers.{ell}.attn"
        return {proj: self.params[f"{pre}.{proj}"] for proj in ("wq", "wk", "wv", "wo")}
