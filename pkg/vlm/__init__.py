"""
VisCoP 桌面级视觉语言模型 - 数值核心、模型组件、训练与分析
"""
from .numerics import (
    ContractError, DegenerateBatchError, DimensionError, GradTape, NumericError, Tensor, XorShiftRng,
)
from .model import VlmModel, build_model, checkpoint_hash, load_checkpoint, save_checkpoint
from .trainer import (
    PRESETS, AdaptationStrategy, NumericAbort, StrategyError, apply_strategy, evaluate_accuracy, train,
)
from .domains import DatasetError, QASample, generate_scene, make_benchmark, render
from .analysis import MetricError, delta_metrics

__all__ = [
    "ContractError", "DegenerateBatchError", "DimensionError", "GradTape", "NumericError", "Tensor",
    "XorShiftRng", "VlmModel", "build_model", "checkpoint_hash", "load_checkpoint", "save_checkpoint",
    "PRESETS", "AdaptationStrategy", "NumericAbort", "StrategyError", "apply_strategy",
    "evaluate_accuracy", "train", "DatasetError", "QASample", "generate_scene", "make_benchmark",
    "render", "MetricError", "delta_metrics",
]
