"""
分析阶段 - 成对嵌入统计、探针注意力集中度、语言对视觉的注意力、域可分性与答案分布
"""
from typing import Any, Dict, List, Tuple

import numpy as np

from config import ExperimentConfig
from vlm.analysis import (
    collect_embeddings, domain_classifier_accuracy, embedding_source, language_visual_attention,
    paired_embedding_stats, probe_attention_map,
)
from vlm.domains import QASample, answer_marginals, make_domain_pair
from vlm.model import VlmModel
from vlm.numerics import NumericError

from .base import BaseStage


def paired_samples(cfg: ExperimentConfig, limit: int) -> Tuple[List[QASample], List[QASample]]:
    """同一批场景在源域 / 目标域上的渲染，按 pair_id 对齐"""
    family = cfg.data.families[0]
    level = 1 if cfg.experiment.shift == "task" else None
    source, target = make_domain_pair(cfg.experiment.shift, family, cfg.data, cfg.data.seed, level)
    return source.samples[:limit], target.samples[:limit]


class AnalysisStage(BaseStage):
    """对基座和专家模型做适应后分析，结果写进报告的 analysis 字段"""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__("analysis", cfg)

    def embedding_stats(self, model: VlmModel, source: List[QASample], target: List[QASample]) -> Dict[str, Any]:
        src_ids, src = collect_embeddings(model, source)
        tgt_ids, tgt = collect_embeddings(model, target)
        # 目标域 pair_id 与源域相同（同一场景）
        stats: Dict[str, Any] = {"embedding_source": embedding_source(model)}
        if self.cfg.analysis.bd_space == "projected":
            # 投影坐标由外部工具给出，见 export-embeddings --projected
            stats["psd"] = float(np.linalg.norm(src - tgt, axis=1).mean())
            return stats
        try:
            bd, psd = paired_embedding_stats(src, tgt, src_ids, tgt_ids, self.cfg.analysis.cov_eps_scale)
        except NumericError as e:
            self.logger.warning("bhattacharyya distance unavailable: %s", e)
            bd, psd = None, float(np.linalg.norm(src - tgt, axis=1).mean())
        stats.update({"bd": bd, "psd": psd})
        return stats

    async def process(self, input_data: Any) -> Dict[str, Any]:
        base: VlmModel = input_data["base"]
        expert: VlmModel = input_data["expert"]
        source, target = paired_samples(self.cfg, self.cfg.analysis.embedding_samples)

        result: Dict[str, Any] = {
            "bd_space": self.cfg.analysis.bd_space,
            "pooling": self.cfg.analysis.pooling,
            "pairs": len(source),
            "base": self.embedding_stats(base, source, target),
            "expert": self.embedding_stats(expert, source, target),
            "domain_classifier_accuracy": domain_classifier_accuracy(
                [s.frames for s in source], [s.frames for s in target], seed=self.cfg.data.seed),
            "answer_marginals": {"source": answer_marginals(source), "target": answer_marginals(target)},
        }

        sample = target[0]
        if expert.has_probes and expert.num_probes > 0:
            maps = probe_attention_map(expert, sample.frames)
            uniform = 1.0 / next(iter(maps.values())).size
            result["probe_map_peak_ratio"] = {str(ell): float(m.max() / uniform) for ell, m in maps.items()}

        per_token = language_visual_attention(expert, sample.frames, sample.question)
        result["language_visual_attention"] = {
            "tokens": len(per_token),
            "visual": float(np.mean([t["visual"] for t in per_token])) if per_token else 0.0,
            "probes": float(np.mean([t["probes"] for t in per_token])) if per_token else 0.0,
        }
        self.logger.info("analysis: base %s / expert %s", result["base"], result["expert"])
        return result
