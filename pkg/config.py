"""
配置文件 - VisCoP 桌面级域适应实验
"""
import hashlib
import json
import os
from dataclasses import asdict, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import ConfigDict, TypeAdapter, ValidationError
from pydantic.dataclasses import dataclass

load_dotenv()

_STRICT = ConfigDict(extra="forbid")


SHIFTS = ("view", "modality", "task")
# 合成场景固定为 16×16 像素、4×4 网格
SCENE_SIDE = 16
PLACEMENTS = ("all", "every-2", "every-3", "last")


class ConfigError(ValueError):
    """配置解析或校验失败"""


@dataclass(config=_STRICT)
class EncoderConfig:
    """视觉编码器配置"""
    image_side: int = 16
    patch_side: int = 4
    channels: int = 3
    d_v: int = 32
    layers: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-5
    init_std: float = 0.02
    lora_rank: int = 4  # 仅 VE-LoRA 策略使用
    lora_alpha: float = 8.0

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side ** 2

    @property
    def d_head(self) -> int:
        return self.d_v // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(self.d_v * self.mlp_ratio)


@dataclass(config=_STRICT)
class ProbeConfig:
    """视觉探针配置"""
    num_probes: int = 16
    init_std: float = 0.02
    # "all" / "every-2" / "every-3" / "last"，或显式的层号列表（从 1 开始）
    placement: Union[str, List[int]] = "all"
    interaction: bool = True
    scope: str = "spatio-temporal"  # spatio-temporal | spatial
    residual: bool = True
    scaling: str = "head"  # head: √d_head, model: √d_v

    def layers_for(self, num_layers: int) -> List[int]:
        """解析交互模块所在的编码器层"""
        if not self.interaction:
            return []
        if isinstance(self.placement, list):
            return sorted(set(self.placement))
        if self.placement == "all":
            return list(range(1, num_layers + 1))
        if self.placement == "last":
            return [num_layers]
        step = int(self.placement.split("-")[1])
        return [ell for ell in range(1, num_layers + 1) if ell % step == 0]


@dataclass(config=_STRICT)
class ConnectorConfig:
    """视觉-语言连接器配置"""
    downsample: int = 2
    hidden: int = 64


@dataclass(config=_STRICT)
class DecoderConfig:
    """语言解码器配置"""
    d_lm: int = 64
    layers: int = 4
    heads: int = 4
    context: int = 128
    mlp_ratio: float = 4.0
    lora_rank: int = 4
    lora_alpha: float = 8.0
    init_std: float = 0.02
    ln_eps: float = 1e-5
    prompt_order: str = "EZQA"  # EZQA | ZEQA
    max_answer_len: int = 4


@dataclass(config=_STRICT)
class TrainConfig:
    """训练配置"""
    lr: float = 2e-3
    ve_lr: float = 4e-4  # VE:base = 0.2
    epochs: int = 3
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    max_steps: Optional[int] = None
    log_every: int = 20


@dataclass(config=_STRICT)
class DataConfig:
    """合成域数据配置"""
    frames: int = 4
    # 每个问题类型的场景数，按 80/20 切分；默认三类合计每个域 480 train / 120 eval
    samples_per_family: int = 200
    min_objects: int = 2
    max_objects: int = 5
    seed: int = 0
    families: List[str] = field(default_factory=lambda: ["color", "region", "object"])
    task_levels: List[int] = field(default_factory=lambda: [1, 2, 3])
    max_text_tokens: int = 16


@dataclass(config=_STRICT)
class AnalysisConfig:
    """分析工具配置"""
    pooling: str = "mean"
    bd_space: str = "raw"  # raw | projected
    cov_eps_scale: float = 1e-6
    embedding_samples: int = 64


@dataclass(config=_STRICT)
class SystemConfig:
    """系统配置"""
    output_dir: str = field(default_factory=lambda: os.getenv("VISCOP_OUTPUT_ROOT", "./runs"))
    log_level: str = field(default_factory=lambda: os.getenv("VISCOP_LOG_LEVEL", "INFO"))
    eval_workers: int = 4


@dataclass(config=_STRICT)
class ExperimentSection:
    """实验元信息"""
    name: str
    shift: str
    strategy: Optional[str] = None  # 为空时按位移类型取默认策略
    seeds: List[int] = field(default_factory=lambda: [0])


@dataclass(config=_STRICT)
class ExperimentConfig:
    """主配置类"""
    experiment: ExperimentSection
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4, lr=3e-3))
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    system: SystemConfig = field(default_factory=SystemConfig)


_ADAPTER = TypeAdapter(ExperimentConfig)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """检查跨字段约束"""
    enc, dec = cfg.encoder, cfg.decoder
    if enc.image_side != SCENE_SIDE:
        raise ConfigError(f"encoder.image_side 必须等于合成场景边长 {SCENE_SIDE}")
    if enc.image_side % enc.patch_side:
        raise ConfigError(f"encoder.image_side={enc.image_side} 不能被 patch_side={enc.patch_side} 整除")
    if enc.d_v % enc.heads:
        raise ConfigError(f"encoder.d_v={enc.d_v} 不能被 heads={enc.heads} 整除")
    if dec.d_lm % dec.heads:
        raise ConfigError(f"decoder.d_lm={dec.d_lm} 不能被 heads={dec.heads} 整除")
    if enc.grid_side % cfg.connector.downsample:
        raise ConfigError(
            f"connector.downsample={cfg.connector.downsample} 不能整除网格边长 {enc.grid_side}")
    if cfg.experiment.shift not in SHIFTS:
        raise ConfigError(f"experiment.shift 必须是 {SHIFTS} 之一, 实际为 {cfg.experiment.shift!r}")
    probes = cfg.probes
    if probes.num_probes < 1:
        raise ConfigError("probes.num_probes 必须 ≥ 1")
    if isinstance(probes.placement, str) and probes.placement not in PLACEMENTS:
        raise ConfigError(f"probes.placement 必须是 {PLACEMENTS} 之一或层号列表")
    layers = probes.layers_for(enc.layers)
    if probes.interaction and (not layers or any(not 1 <= ell <= enc.layers for ell in layers)):
        raise ConfigError(f"probes.placement={probes.placement} 不是 1..{enc.layers} 的非空子集")
    if probes.scope not in ("spatio-temporal", "spatial"):
        raise ConfigError(f"probes.scope 无效: {probes.scope!r}")
    if probes.scaling not in ("head", "model"):
        raise ConfigError(f"probes.scaling 无效: {probes.scaling!r}")
    if dec.prompt_order not in ("EZQA", "ZEQA"):
        raise ConfigError(f"decoder.prompt_order 无效: {dec.prompt_order!r}")
    data = cfg.data
    if data.frames < 1:
        raise ConfigError("data.frames 必须 ≥ 1")
    if not 2 <= data.min_objects <= data.max_objects <= 16:
        raise ConfigError("data.min_objects/max_objects 必须满足 2 ≤ min ≤ max ≤ 16")
    unknown = set(data.families) - {"color", "region", "object"}
    if unknown or not data.families:
        raise ConfigError(f"data.families 含未知问题类型: {sorted(unknown)}")
    if not data.task_levels or set(data.task_levels) - {1, 2, 3}:
        raise ConfigError("data.task_levels 必须是 {1, 2, 3} 的非空子集")
    if cfg.analysis.pooling != "mean":
        raise ConfigError(f"analysis.pooling 只支持 mean, 实际为 {cfg.analysis.pooling!r}")
    if cfg.analysis.bd_space not in ("raw", "projected"):
        raise ConfigError(f"analysis.bd_space 必须是 raw 或 projected, 实际为 {cfg.analysis.bd_space!r}")
    visual = cfg.data.frames * (enc.n_patches // cfg.connector.downsample ** 2)
    needed = visual + probes.num_probes + cfg.data.max_text_tokens
    if dec.context < needed:
        raise ConfigError(f"decoder.context={dec.context} 小于所需长度 {needed}")
    return cfg


def parse_config(data: Dict[str, Any], source: str = "<dict>", check: bool = True) -> ExperimentConfig:
    """从字典构建配置；check=False 时只做类型校验（用于读取检查点中保存的配置）"""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: 顶层必须是映射")
    try:
        cfg = _ADAPTER.validate_python(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{source}: 字段 {where}: {first['msg']}") from e
    return validate_config(cfg) if check else cfg


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """读取 YAML 配置文件"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"配置文件不存在: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: YAML 解析失败: {getattr(e, 'problem', e)}") from e
    return parse_config(data, str(path))


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    """导出包含全部默认值的 YAML"""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, allow_unicode=True)


def config_hash(cfg: ExperimentConfig) -> str:
    """实验配置哈希（不含 system 段）"""
    payload = config_to_dict(cfg)
    payload.pop("system", None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# 默认配置实例
default_config = parse_config({"experiment": {"name": "default", "shift": "view"}})
