"""
实验阶段模块
"""
from .base import BaseStage
from .pretrain import PretrainStage
from .adapt import AdaptStage
from .ablate import AblationStage
from .analysis import AnalysisStage

__all__ = ['BaseStage', 'PretrainStage', 'AdaptStage', 'AblationStage', 'AnalysisStage']
