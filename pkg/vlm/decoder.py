"""
语言解码器 - 小型自回归 Transformer，输入为 [E; Z; Q; A]，注意力投影上可挂 LoRA
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import DecoderConfig
from .layers import linear, lora_linear, mlp, multi_head_attention
from .numerics import (
    ContractError, DegenerateBatchError, DimensionError, Tensor, XorShiftRng, add, concat_rows,
    cross_entropy, gather_rows, layer_norm, ones, parameter, slice_rows, zeros,
)

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIAL_TOKENS = (PAD, BOS, EOS, SEP)


class Vocabulary:
    """固定的词级词表"""

    def __init__(self, words: Sequence[str]):
        tokens = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("词表中存在重复的词")
        self.tokens: List[str] = tokens
        self.index: Dict[str, int] = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    def encode(self, words: Sequence[str]) -> List[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f"词表中没有 {e.args[0]!r}") from e

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> str:
        return json.dumps({tok: i for i, tok in enumerate(self.tokens)}, ensure_ascii=False, indent=2)

    def save(self, path: Union[str, Path]):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        mapping = json.loads(Path(path).read_text(encoding="utf-8"))
        ordered = [tok for tok, _ in sorted(mapping.items(), key=lambda kv: kv[1])]
        return cls(ordered[len(SPECIAL_TOKENS):])


@dataclass
class PromptLayout:
    """解码器输入布局：视觉嵌入 E、探针嵌入 Z、问题 Q、答案 A

    损失只计算在 A 上，每个位置用真实前缀预测下一个 token。answer 末尾应包含 EOS。
    """
    visual: Tensor
    question: List[int]
    answer: List[int] = field(default_factory=list)
    probes: Optional[Tensor] = None
    order: str = "EZQA"

    def prefix(self) -> List[Tensor]:
        segments = [self.visual, self.probes] if self.order == "EZQA" else [self.probes, self.visual]
        return [s for s in segments if s is not None and s.shape[0] > 0]

    @property
    def prefix_length(self) -> int:
        return sum(s.shape[0] for s in self.prefix())

    @property
    def total_length(self) -> int:
        return self.prefix_length + len(self.question) + len(self.answer)

    def segment_slices(self) -> Dict[str, slice]:
        """各段在序列中的位置"""
        spans: Dict[str, slice] = {}
        cursor = 0
        names = ("E", "Z") if self.order == "EZQA" else ("Z", "E")
        for name, seg in zip(names, (self.visual, self.probes) if self.order == "EZQA"
                             else (self.probes, self.visual)):
            rows = 0 if seg is None else seg.shape[0]
            spans[name] = slice(cursor, cursor + rows)
            cursor += rows
        spans["Q"] = slice(cursor, cursor + len(self.question))
        cursor += len(self.question)
        spans["A"] = slice(cursor, cursor + len(self.answer))
        return spans

    def targets(self) -> Tuple[np.ndarray, np.ndarray]:
        """位置 i 的目标是 i+1 处的 token；只有预测 A 的位置参与损失"""
        length = self.total_length
        targets = np.zeros(length, dtype=np.int64)
        ignore = np.ones(length, dtype=bool)
        start = length - len(self.answer)
        for j, tok in enumerate(self.answer):
            pos = start + j - 1
            targets[pos] = tok
            ignore[pos] = False
        return targets, ignore


def init_decoder_params(cfg: DecoderConfig, vocab_size: int, rng: XorShiftRng) -> Dict[str, Tensor]:
    d, std = cfg.d_lm, cfg.init_std
    hidden = int(d * cfg.mlp_ratio)
    params: Dict[str, Tensor] = {
        "tok_emb": parameter(rng, (vocab_size, d), std, "tok_emb"),
        "pos_emb": parameter(rng, (cfg.context, d), std, "pos_emb"),
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
    params["ln_f.g"] = ones((d,), "ln_f.g")
    params["ln_f.b"] = zeros((d,), "ln_f.b")
    params["head"] = parameter(rng, (d, vocab_size), std, "head")
    if cfg.lora_rank > 0:
        r = cfg.lora_rank
        lora_rng = rng.spawn(7)
        for ell in range(1, cfg.layers + 1):
            for target in ("q", "v"):
                pre = f"lora.{ell}.{target}"
                params[f"{pre}.a"] = parameter(lora_rng, (d, r), std, f"{pre}.a")
                params[f"{pre}.b"] = zeros((r, d), f"{pre}.b")
    return params


class LanguageDecoder:
    """自回归解码器：配置 + 命名参数"""

    def __init__(self, cfg: DecoderConfig, vocab_size: int, rng: Optional[XorShiftRng] = None,
                 params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.params = params if params is not None else init_decoder_params(cfg, vocab_size, rng or XorShiftRng(0))

    @property
    def lora_scaling(self) -> float:
        return self.cfg.lora_alpha / self.cfg.lora_rank if self.cfg.lora_rank > 0 else 0.0

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.params.items()

    def _block(self, ell: int, x: Tensor, mask: np.ndarray, record: Optional[List[np.ndarray]]) -> Tensor:
        p, cfg = self.params, self.cfg
        pre = f"layers.{ell}"
        h = layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.ln_eps)
        q = lora_linear(h, p[f"{pre}.attn.wq"], p.get(f"lora.{ell}.q.a"), p.get(f"lora.{ell}.q.b"),
                        self.lora_scaling)
        k = linear(h, p[f"{pre}.attn.wk"])
        v = lora_linear(h, p[f"{pre}.attn.wv"], p.get(f"lora.{ell}.v.a"), p.get(f"lora.{ell}.v.b"),
                        self.lora_scaling)
        x = add(x, multi_head_attention(q, k, v, p[f"{pre}.attn.wo"], cfg.heads, mask=mask, record=record))
        h = layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.ln_eps)
        return add(x, mlp(h, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"], p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"]))


def decode_forward(decoder: LanguageDecoder, layout: PromptLayout,
                   record: Optional[List[np.ndarray]] = None) -> Tensor:
    """因果自注意力处理拼接序列，返回每个位置的 logits (Len_total×V)"""
    cfg, p = decoder.cfg, decoder.params
    length = layout.total_length
    if length > cfg.context:
        raise ContractError(f"序列长度 {length} 超出上下文长度 {cfg.context}")
    segments = layout.prefix()
    for seg in segments:
        if seg.shape[1] != cfg.d_lm:
            raise DimensionError(f"前缀嵌入宽度 {seg.shape[1]} 与 d_lm={cfg.d_lm} 不一致")
    ids = list(layout.question) + list(layout.answer)
    if ids:
        segments = segments + [gather_rows(p["tok_emb"], ids)]
    x = add(concat_rows(segments), slice_rows(p["pos_emb"], 0, length))
    mask = np.tril(np.ones((length, length), dtype=bool))
    for ell in range(1, cfg.layers + 1):
        x = decoder._block(ell, x, mask, record)
    x = layer_norm(x, p["ln_f.g"], p["ln_f.b"], cfg.ln_eps)
    return linear(x, p["head"])


def sequence_loss(decoder: LanguageDecoder, layout: PromptLayout) -> Tensor:
    """答案位置上的交叉熵"""
    if not layout.answer:
        raise DegenerateBatchError("答案为空，无法计算损失")
    logits = decode_forward(decoder, layout)
    targets, ignore = layout.targets()
    return cross_entropy(logits, targets, ignore)


def generate_greedy(decoder: LanguageDecoder, visual: Tensor, probes: Optional[Tensor],
                    question: List[int], max_len: int, eos_id: int, order: str = "EZQA") -> List[int]:
    """贪心解码，遇到 EOS 或达到 max_len 停止"""
    if max_len < 1:
        raise ValueError("max_len 必须 ≥ 1")
    answer: List[int] = []
    while len(answer) < max_len:
        layout = PromptLayout(visual=visual, probes=probes, question=question, answer=answer, order=order)
        logits = decode_forward(decoder, layout)
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == eos_id:
            break
        answer = answer + [nxt]
    return answer
