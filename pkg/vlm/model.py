"""
VLM 组合模型 - 编码器、连接器、可选的视觉探针与探针连接器、解码器

参数命名空间：
    encoder.*          视觉编码器（含 encoder.lora.*）
    connector.*        视觉-语言连接器 C
    probes.p0          探针 P⁰
    interaction.{ℓ}.*  交互模块 Φ^ℓ
    probe_connector.*  探针连接器 C_probe
    decoder.*          语言解码器（含 decoder.lora.*）
"""
import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from config import ExperimentConfig, ProbeConfig, config_to_dict, parse_config
from .connectors import MlpConnector, build_connectors, project_probes, project_visual, spatial_downsample
from .decoder import SPECIAL_TOKENS, LanguageDecoder, PromptLayout, Vocabulary, generate_greedy, sequence_loss
from .encoder import LayerActivations, VisionEncoder
from .numerics import DimensionError, Tensor, XorShiftRng
from .probes import VisualProbing

logger = logging.getLogger("viscop.model")

CKPT_MAGIC = b"VISCOP-CKPT 1\n"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """检查点文件损坏或与模型不兼容"""


class VlmModel:
    """视觉语言模型"""

    def __init__(self, cfg: ExperimentConfig, vocab: Vocabulary, encoder: VisionEncoder,
                 connector: MlpConnector, decoder: LanguageDecoder,
                 probing: Optional[VisualProbing] = None, probe_connector: Optional[MlpConnector] = None):
        self.cfg = cfg
        self.vocab = vocab
        self.encoder = encoder
        self.connector = connector
        self.decoder = decoder
        self.probing = probing
        self.probe_connector = probe_connector
        self.probe_cfg: ProbeConfig = cfg.probes

    @property
    def has_probes(self) -> bool:
        return self.probing is not None

    @property
    def num_probes(self) -> int:
        return self.probing.bank.num_probes if self.probing else 0

    def attach_probes(self, probe_cfg: ProbeConfig, rng: XorShiftRng):
        """从当前编码器权重构建探针、交互模块和 C_probe"""
        self.probing = VisualProbing.from_encoder(self.encoder, probe_cfg, rng.spawn(1))
        _, self.probe_connector = build_connectors(self.cfg.connector, self.encoder.cfg.d_v,
                                                   self.decoder.cfg.d_lm, rng.spawn(2),
                                                   self.decoder.cfg.init_std)
        self.probe_cfg = probe_cfg
        logger.info("attached %d probes at layers %s", probe_cfg.num_probes, self.probing.placement)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for name, p in self.encoder.named_parameters():
            yield f"encoder.{name}", p
        yield from self.connector.named_parameters()
        if self.probing is not None:
            yield from self.probing.named_parameters()
            yield from self.probe_connector.named_parameters()
        for name, p in self.decoder.named_parameters():
            yield f"decoder.{name}", p

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.size for _, p in self.named_parameters() if p.requires_grad or not trainable_only)

    # ------------------------------------------------------------------
    # 前向
    # ------------------------------------------------------------------

    def encode(self, frames: np.ndarray, record: Optional[List[np.ndarray]] = None) -> LayerActivations:
        return self.encoder(frames, record)

    def prefix(self, acts: LayerActivations,
               probe_record: Optional[Dict[int, np.ndarray]] = None) -> Tuple[Tensor, Optional[Tensor]]:
        """E = C(pool(X^L))，Z = C_probe(P^L)"""
        pooled = spatial_downsample(acts.last, acts.frames, self.cfg.connector.downsample)
        visual = project_visual(pooled, self.connector)
        probes = None
        if self.probing is not None:
            probes = project_probes(self.probing(acts, probe_record), self.probe_connector)
        return visual, probes

    def question_ids(self, question: List[str]) -> List[int]:
        v = self.vocab
        return [v.bos_id] + v.encode(question) + [v.sep_id]

    def answer_ids(self, answer: List[str]) -> List[int]:
        return self.vocab.encode(answer) + [self.vocab.eos_id]

    def layout(self, visual: Tensor, probes: Optional[Tensor], question: List[str],
               answer: Optional[List[str]] = None) -> PromptLayout:
        return PromptLayout(
            visual=visual,
            probes=probes,
            question=self.question_ids(question),
            answer=self.answer_ids(answer) if answer is not None else [],
            order=self.cfg.decoder.prompt_order,
        )

    def loss(self, frames: np.ndarray, question: List[str], answer: List[str],
             acts: Optional[LayerActivations] = None) -> Tensor:
        acts = acts if acts is not None else self.encode(frames)
        visual, probes = self.prefix(acts)
        return sequence_loss(self.decoder, self.layout(visual, probes, question, answer))

    def generate(self, frames: np.ndarray, question: List[str],
                 acts: Optional[LayerActivations] = None) -> List[str]:
        """贪心解码答案词序列（不含 EOS）"""
        acts = acts if acts is not None else self.encode(frames)
        visual, probes = self.prefix(acts)
        ids = generate_greedy(self.decoder, visual, probes, self.question_ids(question),
                              self.cfg.decoder.max_answer_len, self.vocab.eos_id,
                              self.cfg.decoder.prompt_order)
        return self.vocab.decode(ids)

    def effective_config(self) -> ExperimentConfig:
        """带有实际探针配置的实验配置"""
        return dataclasses.replace(self.cfg, probes=self.probe_cfg)


def build_model(cfg: ExperimentConfig, vocab: Vocabulary, seed: int = 0, with_probes: bool = False) -> VlmModel:
    """按配置随机初始化模型；各组件使用派生的独立随机流"""
    rng = XorShiftRng(seed)
    encoder = VisionEncoder(cfg.encoder, rng.spawn(10))
    connector, _ = build_connectors(cfg.connector, cfg.encoder.d_v, cfg.decoder.d_lm, rng.spawn(20),
                                    cfg.decoder.init_std)
    decoder = LanguageDecoder(cfg.decoder, len(vocab), rng.spawn(30))
    model = VlmModel(cfg, vocab, encoder, connector, decoder)
    if with_probes:
        model.attach_probes(cfg.probes, rng.spawn(40))
    return model


# ---------------------------------------------------------------------------
# 检查点：魔数行 + 长度前缀 JSON 头 + 按名字排序的小端 float64 负载
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    cfg: ExperimentConfig
    vocab: Vocabulary
    params: Dict[str, np.ndarray]
    has_probes: bool
    extra: Dict[str, Any] = field(default_factory=dict)


def _experiment_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    payload = config_to_dict(cfg)
    payload.pop("system", None)
    return payload


def checkpoint_bytes(model: VlmModel, extra: Optional[Dict[str, Any]] = None) -> bytes:
    params = model.parameters()
    names = sorted(params)
    entries, chunks, offset = [], [], 0
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunk = data.tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    header = {
        "version": CKPT_VERSION,
        "config": _experiment_dict(model.effective_config()),
        "vocab": model.vocab.tokens,
        "probes": model.has_probes,
        "params": entries,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(model: VlmModel, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> str:
    """写入检查点和同目录的 vocab.json，返回检查点哈希"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = checkpoint_bytes(model, extra)
    path.write_bytes(blob)
    model.vocab.save(path.parent / "vocab.json")
    digest = hashlib.sha256(blob).hexdigest()
    logger.info("checkpoint saved: %s (%s)", path, digest[:12])
    return digest


def checkpoint_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"检查点不存在: {path}")
    blob = path.read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: 不是 VISCOP 检查点")
    pos = len(CKPT_MAGIC)
    (head_len,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: 头部损坏") from e
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: 不支持的版本 {header.get('version')}")
    payload = blob[pos + head_len:]
    params: Dict[str, np.ndarray] = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start + 8 * count > len(payload):
            raise CheckpointError(f"{path}: 参数 {entry['name']} 超出文件末尾")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    tokens = header["vocab"]
    vocab = Vocabulary(tokens[len(SPECIAL_TOKENS):])
    if vocab.tokens != tokens:
        raise CheckpointError(f"{path}: 词表与特殊符号顺序不一致")
    cfg = parse_config(header["config"], str(path), check=False)
    return Checkpoint(cfg=cfg, vocab=vocab, params=params, has_probes=header["probes"], extra=header["extra"])


def assign_parameters(model: VlmModel, params: Dict[str, np.ndarray], strict: bool = True):
    """按名字写入参数；模型中不存在的名字在 strict 模式下报错"""
    own = model.parameters()
    for name, value in params.items():
        target = own.get(name)
        if target is None:
            if strict:
                raise CheckpointError(f"模型中没有参数 {name}")
            continue
        if target.shape != value.shape:
            raise DimensionError(f"参数 {name}: 检查点形状 {value.shape} 与模型 {target.shape} 不一致")
        target.data = np.array(value, dtype=np.float64)


def model_from_checkpoint(path: Union[str, Path], cfg: Optional[ExperimentConfig] = None) -> VlmModel:
    """从检查点恢复模型；给定 cfg 时保留其 experiment/train/data 等段，模型结构仍取自检查点"""
    ckpt = load_checkpoint(path)
    model_cfg = ckpt.cfg
    if cfg is not None:
        model_cfg = dataclasses.replace(cfg, encoder=ckpt.cfg.encoder, connector=ckpt.cfg.connector,
                                        decoder=ckpt.cfg.decoder,
                                        probes=ckpt.cfg.probes if ckpt.has_probes else cfg.probes)
    model = build_model(model_cfg, ckpt.vocab, with_probes=ckpt.has_probes)
    assign_parameters(model, ckpt.params)
    return model
