"""
源域预训练阶段 - 训练出基座 VLM 并保存检查点
"""
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict

from config import ExperimentConfig
from vlm.domains import BenchmarkSuite, build_vocabulary
from vlm.model import VlmModel, build_model, save_checkpoint
from vlm.trainer import PRETRAIN_STRATEGY, TrainResult, apply_strategy, train

from .base import BaseStage


@dataclass
class PretrainOutcome:
    model: VlmModel
    result: TrainResult
    checkpoint: Path
    checkpoint_hash: str
    accuracies: Dict[str, float]


class PretrainStage(BaseStage):
    """基座预训练：连接器、编码器和解码器在源域数据上联合训练（不带探针和 LoRA）"""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__("pretrain", cfg)

    async def process(self, input_data: Any) -> PretrainOutcome:
        suite: BenchmarkSuite = input_data["suite"]
        seed: int = input_data["seed"]
        path = Path(input_data["checkpoint"])

        model = build_model(self.cfg, build_vocabulary(), seed=seed)
        train_cfg = dataclasses.replace(self.cfg.pretrain, seed=seed)
        audit = apply_strategy(model, PRETRAIN_STRATEGY, train_cfg)
        samples = suite.source_train
        self.logger.info("pretraining on %d source samples (seed %d)", len(samples), seed)
        result = train(model, samples, audit, train_cfg)

        accuracies = await self.evaluate(model, {n: b.eval for n, b in suite.source.items()})
        digest = save_checkpoint(model, path, extra={
            "role": "base",
            "seed": seed,
            "config_hash": self.config_hash,
            "steps": result.steps,
        })
        return PretrainOutcome(model=model, result=result, checkpoint=path, checkpoint_hash=digest,
                               accuracies=accuracies)
