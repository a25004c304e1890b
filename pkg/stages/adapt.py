"""
目标域适应阶段 - 从基座检查点出发，按策略门控参数、训练、评测
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from config import ExperimentConfig, ProbeConfig
from vlm.domains import BenchmarkSuite
from vlm.model import VlmModel, model_from_checkpoint, save_checkpoint
from vlm.trainer import GatingAudit, TrainResult, apply_strategy, get_strategy, train

from .base import BaseStage


@dataclass
class AdaptOutcome:
    model: VlmModel
    strategy: str
    audit: Optional[GatingAudit]
    trainable_params: int
    accuracies: Dict[str, float]
    result: Optional[TrainResult] = None
    checkpoint: Optional[Path] = None
    checkpoint_hash: Optional[str] = None
    optimizer: Dict[str, Any] = field(default_factory=dict)


class AdaptStage(BaseStage):
    """适应一个专家模型

    input_data 键：
        base         基座检查点路径
        strategy     策略名
        seed         训练种子
        suite        BenchmarkSuite
        probes       可选的 ProbeConfig（消融扫描用）
        checkpoint   可选的专家检查点输出路径
        audit_only   只做门控与参数计数，不训练也不评测
    """

    def __init__(self, cfg: ExperimentConfig):
        super().__init__("adapt", cfg)

    async def process(self, input_data: Any) -> AdaptOutcome:
        suite: BenchmarkSuite = input_data["suite"]
        seed: int = input_data["seed"]
        strategy = get_strategy(input_data["strategy"])
        probe_cfg: ProbeConfig = input_data.get("probes") or self.cfg.probes

        model = model_from_checkpoint(input_data["base"], self.cfg)
        train_cfg = dataclasses.replace(self.cfg.train, seed=seed)
        audit = apply_strategy(model, strategy, train_cfg, probe_cfg)
        trainable = model.parameter_count(trainable_only=True)
        optimizer = {
            "name": "adam",
            "lr": train_cfg.lr,
            "ve_lr": train_cfg.ve_lr,
            "betas": [train_cfg.beta1, train_cfg.beta2],
            "eps": train_cfg.adam_eps,
            "weight_decay": train_cfg.weight_decay,
            "epochs": train_cfg.epochs,
            "batch_size": train_cfg.batch_size,
        }
        if input_data.get("audit_only"):
            return AdaptOutcome(model=model, strategy=strategy.name, audit=audit, trainable_params=trainable,
                                accuracies={}, optimizer=optimizer)

        samples = suite.target_train
        self.logger.info("adapting with %s on %d target samples (seed %d)", strategy.name, len(samples), seed)
        result = train(model, samples, audit, train_cfg)
        accuracies = await self.evaluate(model, suite.eval_sets())

        outcome = AdaptOutcome(model=model, strategy=strategy.name, audit=audit, trainable_params=trainable,
                               accuracies=accuracies, result=result, optimizer=optimizer)
        if input_data.get("checkpoint"):
            outcome.checkpoint = Path(input_data["checkpoint"])
            outcome.checkpoint_hash = save_checkpoint(model, outcome.checkpoint, extra={
                "role": "expert",
                "strategy": strategy.name,
                "seed": seed,
                "config_hash": self.config_hash,
                "steps": result.steps,
            })
        return outcome

    async def evaluate_checkpoint(self, path: Path, suite: BenchmarkSuite) -> AdaptOutcome:
        """迁移设定：直接评测已有的专家检查点，不训练"""
        model = model_from_checkpoint(path, self.cfg)
        accuracies = await self.evaluate(model, suite.eval_sets())
        return AdaptOutcome(model=model, strategy="eval-only", audit=None,
                            trainable_params=model.parameter_count(trainable_only=True),
                            accuracies=accuracies, checkpoint=Path(path))
