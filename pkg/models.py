"""
数据模型定义 - VisCoP 域适应实验
"""
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class TaskStatus(str, Enum):
    """任务状态枚举"""
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"
    BLOCKED = "blocked"


class TaskType(str, Enum):
    """实验任务类型枚举"""
    PRETRAIN = "pretrain"
    ADAPT = "adapt"
    ABLATE = "ablate"
    EVALUATE = "evaluate"
    ANALYZE = "analyze"


class ExperimentTask(BaseModel):
    """实验任务模型"""
    id: str
    type: TaskType
    title: str
    status: TaskStatus = TaskStatus.PENDING
    priority: int = 5  # 1-10, 1 最高
    dependencies: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.now)
    updated_at: datetime = Field(default_factory=datetime.now)
    metadata: Dict[str, Any] = Field(default_factory=dict)
    result: Optional[Dict[str, Any]] = None


class BenchmarkResult(BaseModel):
    """单个基准上的基座 / 专家准确率（百分点）"""
    benchmark: str
    split: str  # target | source
    base_acc: float
    expert_acc: float


class AdaptationReport(BaseModel):
    """适应报告：Δ_target = Acc_target^expert − Acc_target^base，Δ_source 同理"""
    strategy: str
    shift: str
    seed: int
    config_hash: str
    base: Dict[str, float]
    expert: Dict[str, float]
    target_benchmarks: List[str]
    source_benchmarks: List[str]
    acc_target_base: float
    acc_target_expert: float
    acc_source_base: float
    acc_source_expert: float
    delta_target: float
    delta_source: float
    trainable_params: int = 0
    checkpoint_hash: Optional[str] = None
    loss_curve: List[float] = Field(default_factory=list)
    analysis: Dict[str, Any] = Field(default_factory=dict)

    def rows(self) -> List[BenchmarkResult]:
        out = []
        for split, names in (("target", self.target_benchmarks), ("source", self.source_benchmarks)):
            for name in names:
                out.append(BenchmarkResult(benchmark=name, split=split, base_acc=self.base[name],
                                           expert_acc=self.expert[name]))
        return out


class AblationRow(BaseModel):
    """消融扫描中的一格"""
    axis: str
    cell: str
    strategy: str
    trainable_params: int
    config_hash: str
    seed: int
    delta_target: Optional[float] = None  # 只做参数审计时为空
    delta_source: Optional[float] = None


class RunManifest(BaseModel):
    """一次运行的清单"""
    command: str
    experiment: str
    strategy: str
    shift: str
    config_hash: str
    seed: int
    datasets: List[str] = Field(default_factory=list)
    checkpoint: Optional[str] = None
    checkpoint_hash: Optional[str] = None
    base_checkpoint: Optional[str] = None
    metrics: Dict[str, float] = Field(default_factory=dict)
    optimizer: Dict[str, Any] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list)


class ExperimentState(BaseModel):
    """实验状态模型"""
    experiment_id: str
    name: str
    status: str = "initializing"
    current_phase: str = "pretrain"
    files: List[str] = Field(default_factory=list)
    reports: List[AdaptationReport] = Field(default_factory=list)
    ablation: List[AblationRow] = Field(default_factory=list)
    progress: float = 0.0
    errors: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.now)
    updated_at: datetime = Field(default_factory=datetime.now)
