"""
实验阶段基类
"""
import asyncio
import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Sequence

from config import ExperimentConfig, config_hash
from vlm.domains import QASample
from vlm.model import VlmModel
from vlm.trainer import evaluate_accuracy


class BaseStage(ABC):
    """实验阶段基类"""

    def __init__(self, stage_id: str, cfg: ExperimentConfig):
        self.stage_id = stage_id
        self.cfg = cfg
        self.logger = logging.getLogger(f"viscop.stage.{stage_id}")

    @property
    def config_hash(self) -> str:
        return config_hash(self.cfg)

    @abstractmethod
    async def process(self, input_data: Any) -> Any:
        """阶段的核心逻辑"""
        pass

    async def evaluate(self, model: VlmModel, eval_sets: Dict[str, Sequence[QASample]]) -> Dict[str, float]:
        """并发评测多个基准，返回 {基准: 准确率（百分点）}

        评测不开磁带，只读模型参数，可以放到线程里跑；并发数受 system.eval_workers 限制。
        """
        names: List[str] = sorted(eval_sets)
        limit = asyncio.Semaphore(max(1, self.cfg.system.eval_workers))

        async def _one(name: str) -> float:
            async with limit:
                return await asyncio.to_thread(evaluate_accuracy, model, eval_sets[name])

        accs = await asyncio.gather(*(_one(n) for n in names))
        result = {name: 100.0 * acc for name, acc in zip(names, accs)}
        self.logger.info("evaluated %d benchmarks: %s", len(names),
                         ", ".join(f"{n}={v:.1f}" for n, v in result.items()))
        return result
