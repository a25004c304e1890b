"""
适应训练器 - 把每种适应策略表达为参数组门控 + 学习率倍率，并运行源域预训练和目标域适应
"""
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from config import ProbeConfig, TrainConfig
from .analysis import MetricError
from .model import VlmModel
from .numerics import DegenerateBatchError, GradTape, Tensor, XorShiftRng, add, scale

logger = logging.getLogger("viscop.trainer")

GROUPS = ("VL-C", "VE-full", "VE-LoRA", "VE-Last-4", "VisCoP", "LLM-full", "LLM-LoRA")
VE_GROUPS = ("VE-full", "VE-LoRA", "VE-Last-4")
LAST_K_LAYERS = 4


class StrategyError(ValueError):
    """未知策略或参数组"""


class NumericAbort(RuntimeError):
    """训练损失出现 NaN/Inf"""

    def __init__(self, step: int, value: float):
        super().__init__(f"第 {step} 步损失非有限值 ({value})，训练中止")
        self.step = step
        self.value = value


class AdaptationStrategy(BaseModel):
    """适应策略：哪些参数组可训练，以及各组的学习率倍率"""
    name: str
    description: str = ""
    groups: List[str]
    lr_multipliers: Dict[str, float] = Field(default_factory=dict)
    probe_overrides: Dict[str, Any] = Field(default_factory=dict)

    def validate_groups(self):
        unknown = [g for g in self.groups if g not in GROUPS]
        if unknown:
            raise StrategyError(f"策略 {self.name}: 未知参数组 {unknown}，可选 {list(GROUPS)}")
        unknown = [g for g in self.lr_multipliers if g not in self.groups]
        if unknown:
            raise StrategyError(f"策略 {self.name}: 学习率倍率指向未启用的参数组 {unknown}")

    @property
    def uses_probes(self) -> bool:
        return "VisCoP" in self.groups


def _preset(name: str, description: str, groups: Sequence[str], **kwargs) -> AdaptationStrategy:
    return AdaptationStrategy(name=name, description=description, groups=list(groups), **kwargs)


PRESETS: Dict[str, AdaptationStrategy] = {s.name: s for s in [
    _preset("vlc-only", "VL-C", ["VL-C"]),
    _preset("vlc-ve", "VL-C + VE", ["VL-C", "VE-full"]),
    _preset("vlc-ve-llm", "VL-C + VE + LLM", ["VL-C", "VE-full", "LLM-full"]),
    _preset("vlc-llm-lora", "VL-C + LLM LoRA", ["VL-C", "LLM-LoRA"]),
    _preset("viscop", "VL-C + VisCoP + LLM LoRA", ["VL-C", "VisCoP", "LLM-LoRA"]),
    _preset("viscop-llm-full", "VL-C + VisCoP + LLM", ["VL-C", "VisCoP", "LLM-full"]),
    _preset("vp-only", "VL-C + 探针（无交互模块）+ LLM LoRA", ["VL-C", "VisCoP", "LLM-LoRA"],
            probe_overrides={"interaction": False}),
    _preset("vlc-ve-lora-llm-lora", "VL-C + VE LoRA + LLM LoRA", ["VL-C", "VE-LoRA", "LLM-LoRA"]),
    _preset("vlc-last4-llm-lora", "VL-C + VE 末 4 层 + LLM LoRA", ["VL-C", "VE-Last-4", "LLM-LoRA"]),
    _preset("qformer", "VL-C + 仅末层交互模块 + LLM LoRA", ["VL-C", "VisCoP", "LLM-LoRA"],
            probe_overrides={"placement": "last"}),
]}

# 基座模型的源域预训练：除 LoRA 外全部可训练
PRETRAIN_STRATEGY = _preset("pretrain", "源域预训练", ["VL-C", "VE-full", "LLM-full"],
                            lr_multipliers={"VE-full": 1.0})

# 每种位移的默认策略
DEFAULT_STRATEGY = {"view": "viscop", "modality": "viscop", "task": "viscop-llm-full"}


def get_strategy(name: str) -> AdaptationStrategy:
    if name == PRETRAIN_STRATEGY.name:
        return PRETRAIN_STRATEGY
    try:
        return PRESETS[name]
    except KeyError:
        raise StrategyError(f"未知策略 {name!r}，可选 {sorted(PRESETS)}") from None


def group_members(model: VlmModel, group: str) -> List[str]:
    """参数组包含的参数名"""
    names = [n for n, _ in model.named_parameters()]
    num_layers = model.encoder.cfg.layers
    if group == "VL-C":
        members = [n for n in names if n.startswith("connector.")]
    elif group == "VE-full":
        members = [n for n in names if n.startswith("encoder.") and not n.startswith("encoder.lora.")]
    elif group == "VE-LoRA":
        members = [n for n in names if n.startswith("encoder.lora.")]
    elif group == "VE-Last-4":
        layers = range(max(1, num_layers - LAST_K_LAYERS + 1), num_layers + 1)
        prefixes = tuple(f"encoder.layers.{ell}." for ell in layers)
        members = [n for n in names if n.startswith(prefixes)]
    elif group == "VisCoP":
        members = [n for n in names if n.startswith(("probes.", "interaction.", "probe_connector."))]
    elif group == "LLM-full":
        members = [n for n in names if n.startswith("decoder.") and not n.startswith("decoder.lora.")]
    elif group == "LLM-LoRA":
        members = [n for n in names if n.startswith("decoder.lora.")]
    else:
        raise StrategyError(f"未知参数组 {group!r}")
    if not members:
        hint = "（LoRA 秩为 0？）" if group.endswith("LoRA") else ""
        raise StrategyError(f"参数组 {group} 在当前模型中没有参数{hint}")
    return members


def params_digest(model: VlmModel, names: Sequence[str]) -> str:
    """给定参数的序列化字节哈希"""
    params = model.parameters()
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class GatingAudit:
    """门控结果，用于训练后的冻结参数核对"""
    strategy: str
    trainable: List[str]
    frozen: List[str]
    frozen_digest: str
    learning_rates: Dict[str, float] = field(default_factory=dict)

    @property
    def trainable_count(self) -> int:
        return len(self.trainable)


def resolve_probe_config(base: ProbeConfig, strategy: AdaptationStrategy) -> ProbeConfig:
    if not strategy.probe_overrides:
        return base
    try:
        return dataclasses.replace(base, **strategy.probe_overrides)
    except TypeError as e:
        raise StrategyError(f"策略 {strategy.name}: 无效的探针覆盖项 {strategy.probe_overrides}") from e


def apply_strategy(model: VlmModel, strategy: AdaptationStrategy, cfg: TrainConfig,
                   probe_cfg: Optional[ProbeConfig] = None) -> GatingAudit:
    """按策略设置 requires_grad，并记录冻结参数的哈希

    启用 VisCoP 组而模型尚无探针时，从当前编码器权重初始化探针。
    """
    strategy.validate_groups()
    if strategy.uses_probes:
        wanted = resolve_probe_config(probe_cfg or model.probe_cfg, strategy)
        if not model.has_probes or model.probe_cfg != wanted:
            model.attach_probes(wanted, XorShiftRng(cfg.seed).spawn(40))

    learning_rates: Dict[str, float] = {}
    for group in strategy.groups:
        default = cfg.ve_lr / cfg.lr if group in VE_GROUPS else 1.0
        multiplier = strategy.lr_multipliers.get(group, default)
        for name in group_members(model, group):
            learning_rates[name] = cfg.lr * multiplier

    frozen = []
    for name, p in model.named_parameters():
        p.requires_grad = name in learning_rates
        p.zero_grad()
        if not p.requires_grad:
            frozen.append(name)
    audit = GatingAudit(
        strategy=strategy.name,
        trainable=sorted(learning_rates),
        frozen=frozen,
        frozen_digest=params_digest(model, frozen),
        learning_rates=learning_rates,
    )
    logger.info("strategy %s: %d trainable tensors (%d values), %d frozen",
                strategy.name, len(audit.trainable), model.parameter_count(trainable_only=True), len(frozen))
    return audit


def verify_frozen(model: VlmModel, audit: GatingAudit) -> bool:
    """冻结参数的字节是否与门控时一致"""
    return params_digest(model, audit.frozen) == audit.frozen_digest


class Adam:
    """Adam 优化器，解耦权重衰减"""

    def __init__(self, params: Dict[str, Tensor], learning_rates: Dict[str, float], cfg: TrainConfig):
        self.params = params
        self.learning_rates = learning_rates
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.weight_decay = cfg.weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            lr = self.learning_rates[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            data = p.data
            if self.weight_decay:
                data = data - lr * self.weight_decay * data
            p.data = data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainResult:
    strategy: str
    loss_curve: List[float]
    steps: int
    epochs: int
    frozen_intact: bool


def train(model: VlmModel, samples: Sequence, audit: GatingAudit, cfg: TrainConfig,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """小批量 Adam 训练；编码器全部冻结时预先缓存各层激活"""
    if not samples:
        raise DegenerateBatchError("训练集为空")
    params = {name: p for name, p in model.named_parameters() if p.requires_grad}
    if not params:
        raise StrategyError(f"策略 {audit.strategy} 没有可训练参数")
    optimizer = Adam(params, audit.learning_rates, cfg)
    rng = XorShiftRng(cfg.seed).spawn(99)

    cache = None
    if cfg.epochs > 0 and not any(name.startswith("encoder.") for name in params):
        cache = [model.encode(s.frames) for s in samples]

    curve: List[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            batch = order[start:start + cfg.batch_size]
            with GradTape() as tape:
                total = None
                for i in batch:
                    s = samples[i]
                    loss = model.loss(s.frames, s.question, s.answer, acts=cache[i] if cache else None)
                    total = loss if total is None else add(total, loss)
                mean = scale(total, 1.0 / len(batch))
                value = mean.item()
                if not np.isfinite(value):
                    tape.clear()
                    raise NumericAbort(step, value)
                tape.backward(mean)
                tape.clear()
            optimizer.step()
            optimizer.zero_grad()
            curve.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
            if step % cfg.log_every == 0:
                logger.info("[%s] epoch %d step %d loss %.4f", audit.strategy, epoch + 1, step, value)

    intact = verify_frozen(model, audit)
    if not intact:
        logger.error("frozen parameters changed during %s training", audit.strategy)
    return TrainResult(strategy=audit.strategy, loss_curve=curve, steps=step, epochs=cfg.epochs,
                       frozen_intact=intact)


def predict(model: VlmModel, sample) -> List[str]:
    return model.generate(sample.frames, sample.question)


def evaluate_accuracy(model: VlmModel, samples: Sequence) -> float:
    """贪心解码后与标准答案做精确匹配，返回 [0, 1] 内的准确率"""
    if not samples:
        raise MetricError("评测集为空")
    correct = sum(1 for s in samples if predict(model, s) == list(s.answer))
    return correct / len(samples)
