"""
消融扫描阶段 - 探针数量、交互模块放置、其它适应设计
"""
import dataclasses
from typing import Any, Callable, Dict, List, Optional, Tuple

from config import ExperimentConfig, ProbeConfig
from models import AblationRow
from vlm.analysis import delta_metrics
from vlm.domains import BenchmarkSuite
from vlm.trainer import StrategyError

from .adapt import AdaptStage
from .base import BaseStage

PROBE_COUNTS = (1, 4, 8, 16, 32)
PLACEMENT_CELLS = ("all", "every-2", "every-3", "last")
ALTERNATIVE_CELLS = ("vp-only", "vlc-ve-lora-llm-lora", "vlc-last4-llm-lora", "qformer", "viscop")

# 一格 = (名字, 策略, 探针配置)
Cell = Tuple[str, str, ProbeConfig]


def _probe_cells(base: ProbeConfig) -> List[Cell]:
    return [(f"M={m}", "viscop", dataclasses.replace(base, num_probes=m)) for m in PROBE_COUNTS]


def _placement_cells(base: ProbeConfig) -> List[Cell]:
    return [(p, "viscop", dataclasses.replace(base, placement=p)) for p in PLACEMENT_CELLS]


def _alternative_cells(base: ProbeConfig) -> List[Cell]:
    return [(name, name, base) for name in ALTERNATIVE_CELLS]


ABLATION_AXES: Dict[str, Callable[[ProbeConfig], List[Cell]]] = {
    "probes": _probe_cells,
    "placement": _placement_cells,
    "alternatives": _alternative_cells,
}


def ablation_cells(axis: str, base: ProbeConfig) -> List[Cell]:
    try:
        return ABLATION_AXES[axis](base)
    except KeyError:
        raise StrategyError(f"未知的消融轴 {axis!r}，可选 {sorted(ABLATION_AXES)}") from None


class AblationStage(BaseStage):
    """对一条消融轴上的每一格跑一次适应并记录 Δ

    input_data 键：base, seed, suite, axis, base_accuracies（audit_only 时可省略）, audit_only
    """

    def __init__(self, cfg: ExperimentConfig):
        super().__init__("ablate", cfg)
        self.adapter = AdaptStage(cfg)

    async def process(self, input_data: Any) -> List[AblationRow]:
        suite: BenchmarkSuite = input_data["suite"]
        seed: int = input_data["seed"]
        axis: str = input_data["axis"]
        audit_only: bool = input_data.get("audit_only", False)
        base_accs: Optional[Dict[str, float]] = input_data.get("base_accuracies")
        on_cell: Optional[Callable[[str], None]] = input_data.get("on_cell")

        rows: List[AblationRow] = []
        for cell, strategy, probe_cfg in ablation_cells(axis, self.cfg.probes):
            if on_cell is not None:
                on_cell(cell)
            outcome = await self.adapter.process({
                "base": input_data["base"],
                "strategy": strategy,
                "seed": seed,
                "suite": suite,
                "probes": probe_cfg,
                "audit_only": audit_only,
            })
            row = AblationRow(axis=axis, cell=cell, strategy=strategy, trainable_params=outcome.trainable_params,
                              config_hash=self.config_hash, seed=seed)
            if not audit_only:
                report = delta_metrics(base_accs, outcome.accuracies, list(suite.target), list(suite.source))
                row.delta_target = report.delta_target
                row.delta_source = report.delta_source
            self.logger.info("ablation %s/%s: %d trainable, Δ=(%s, %s)", axis, cell, row.trainable_params,
                             row.delta_target, row.delta_source)
            rows.append(row)
        return rows
