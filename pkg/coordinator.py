"""
协调器 - 按阶段调度预训练、适应、消融与分析，并写出实验产物
"""
import asyncio
import csv
import io
import json
import logging
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import aiofiles
import numpy as np
from jinja2 import Template
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from config import ExperimentConfig, config_hash, default_config
from models import (
    AblationRow, AdaptationReport, ExperimentState, ExperimentTask, RunManifest, TaskStatus, TaskType,
)
from stages import AblationStage, AdaptStage, AnalysisStage, PretrainStage
from stages.analysis import paired_samples
from vlm.analysis import (
    aligned_pairs, collect_embeddings, delta_metrics, export_embeddings_csv, load_embeddings_csv,
    paired_embedding_stats,
)
from vlm.domains import BenchmarkSuite, DatasetError, benchmark_suite, load_dataset, save_dataset
from vlm.model import CheckpointError, model_from_checkpoint
from vlm.trainer import DEFAULT_STRATEGY, get_strategy

console = Console()
logger = logging.getLogger("viscop.coordinator")


STATUS_STYLE = {
    TaskStatus.PENDING: "white",
    TaskStatus.IN_PROGRESS: "yellow",
    TaskStatus.COMPLETED: "green",
    TaskStatus.FAILED: "red",
    TaskStatus.BLOCKED: "dim",
}
PHASE_ORDER = list(TaskType)


class TaskManager:
    """实验任务登记：每个 (阶段, seed, 策略/消融轴) 一条记录"""

    def __init__(self):
        self.tasks: Dict[str, ExperimentTask] = {}

    def add_task(self, task: ExperimentTask):
        self.tasks[task.id] = task

    def new_task(self, task_type: TaskType, title: str, dependencies: Optional[List[str]] = None,
                 **metadata) -> ExperimentTask:
        task = ExperimentTask(id=str(uuid.uuid4()), type=task_type, title=title,
                              dependencies=dependencies or [], metadata=metadata)
        self.add_task(task)
        return task

    def get_task(self, task_id: str) -> Optional[ExperimentTask]:
        return self.tasks.get(task_id)

    def for_seed(self, seed: int, task_type: Optional[TaskType] = None) -> List[ExperimentTask]:
        return [t for t in self.tasks.values()
                if t.metadata.get("seed") == seed and (task_type is None or t.type == task_type)]

    def set_status(self, task_id: str, status: TaskStatus, result: Optional[Dict[str, Any]] = None):
        """更新状态；失败时把仍在等待它的任务标为 blocked"""
        task = self.tasks.get(task_id)
        if task is None:
            raise KeyError(f"未登记的任务 {task_id}")
        task.status = status
        task.updated_at = datetime.now()
        if result is not None:
            task.result = result
        logger.debug("task %r -> %s", task.title, status.value)
        if status != TaskStatus.FAILED:
            return
        for other in self.tasks.values():
            if task_id in other.dependencies and other.status == TaskStatus.PENDING:
                other.status = TaskStatus.BLOCKED
                other.updated_at = task.updated_at

    def ready_tasks(self) -> List[ExperimentTask]:
        """依赖都已完成的待运行任务，同优先级下按实验阶段顺序"""
        done = {t.id for t in self.tasks.values() if t.status == TaskStatus.COMPLETED}
        ready = [t for t in self.tasks.values()
                 if t.status == TaskStatus.PENDING and done.issuperset(t.dependencies)]
        return sorted(ready, key=lambda t: (t.priority, PHASE_ORDER.index(t.type), t.created_at))

    def get_progress(self) -> float:
        if not self.tasks:
            return 0.0
        completed = sum(1 for t in self.tasks.values() if t.status == TaskStatus.COMPLETED)
        return completed / len(self.tasks) * 100

    def status_table(self) -> Table:
        table = Table(title="实验任务")
        table.add_column("阶段", style="magenta")
        table.add_column("seed", justify="right")
        table.add_column("策略 / 轴", style="green")
        table.add_column("状态")
        table.add_column("耗时", justify="right")
        for task in sorted(self.tasks.values(), key=lambda t: t.created_at):
            seed = task.metadata.get("seed")
            subject = task.metadata.get("strategy") or task.metadata.get("axis") or ""
            elapsed = (task.updated_at - task.created_at).total_seconds()
            table.add_row(task.type.value, "" if seed is None else str(seed), str(subject),
                          f"[{STATUS_STYLE[task.status]}]{task.status.value}[/]", f"{elapsed:.1f}s")
        return table


class StateManager:
    """状态管理器"""

    def __init__(self):
        self.state: Optional[ExperimentState] = None

    def initialize(self, experiment_id: str, name: str):
        self.state = ExperimentState(experiment_id=experiment_id, name=name)

    def set_phase(self, phase: str):
        if self.state:
            self.state.current_phase = phase
            self.state.updated_at = datetime.now()

    def add_file(self, path: Union[str, Path]):
        if self.state and str(path) not in self.state.files:
            self.state.files.append(str(path))

    def add_report(self, report: AdaptationReport):
        if self.state:
            self.state.reports.append(report)

    def add_ablation(self, rows: List[AblationRow]):
        if self.state:
            self.state.ablation.extend(rows)

    def update_progress(self, progress: float):
        if self.state:
            self.state.progress = progress
            self.state.updated_at = datetime.now()

    def add_error(self, error: str):
        if self.state:
            self.state.errors.append(error)

    def get_state(self) -> Optional[ExperimentState]:
        return self.state


# ---------------------------------------------------------------------------
# 产物格式
# ---------------------------------------------------------------------------

ADAPT_CSV_COLUMNS = ["benchmark", "split", "base_acc", "expert_acc", "delta_target", "delta_source"]
ABLATION_CSV_COLUMNS = ["axis", "cell", "strategy", "trainable_params", "delta_target", "delta_source",
                        "config_hash", "seed"]


def _num(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def report_json(report: AdaptationReport) -> str:
    """排序键、无时间戳，同一配置与种子得到相同字节"""
    return json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def report_csv(report: AdaptationReport) -> str:
    """逐基准行 + 两个平均行（分别携带 Δ_target、Δ_source）"""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ADAPT_CSV_COLUMNS)
    for row in report.rows():
        writer.writerow([row.benchmark, row.split, _num(row.base_acc), _num(row.expert_acc), "", ""])
    writer.writerow(["avg", "target", _num(report.acc_target_base), _num(report.acc_target_expert),
                     _num(report.delta_target), ""])
    writer.writerow(["avg", "source", _num(report.acc_source_base), _num(report.acc_source_expert),
                     "", _num(report.delta_source)])
    return buf.getvalue()


def ablation_csv(rows: List[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.axis, r.cell, r.strategy, r.trainable_params, _num(r.delta_target),
                         _num(r.delta_source), r.config_hash, r.seed])
    return buf.getvalue()


def report_schema() -> str:
    return json.dumps(AdaptationReport.model_json_schema(), sort_keys=True, indent=2) + "\n"


MARKDOWN_TEMPLATE = Template("""# {{ name }}

位移: `{{ shift }}` · 配置哈希: `{{ config_hash }}`

## 适应结果

| 策略 | 种子 | 可训练参数 | Acc_target (base → expert) | Acc_source (base → expert) | Δ_target | Δ_source |
|---|---|---|---|---|---|---|
{% for r in reports -%}
| {{ r.strategy }} | {{ r.seed }} | {{ r.trainable_params }} | {{ "%.2f"|format(r.acc_target_base) }} → {{ "%.2f"|format(r.acc_target_expert) }} | {{ "%.2f"|format(r.acc_source_base) }} → {{ "%.2f"|format(r.acc_source_expert) }} | {{ "%+.2f"|format(r.delta_target) }} | {{ "%+.2f"|format(r.delta_source) }} |
{% endfor %}
{% if ablation %}
## 消融

| 轴 | 格 | 策略 | 可训练参数 | Δ_target | Δ_source | 种子 |
|---|---|---|---|---|---|---|
{% for a in ablation -%}
| {{ a.axis }} | {{ a.cell }} | {{ a.strategy }} | {{ a.trainable_params }} | {{ a.delta_target if a.delta_target is not none else "-" }} | {{ a.delta_source if a.delta_source is not none else "-" }} | {{ a.seed }} |
{% endfor %}
{% endif %}
""")


class ExperimentCoordinator:
    """实验协调器：每个种子一个运行目录，阶段作为任务登记在 TaskManager 中"""

    def __init__(self, config: ExperimentConfig = None):
        self.config = config or default_config
        self.task_manager = TaskManager()
        self.state_manager = StateManager()
        self.stages: Dict[str, Any] = {}
        self.config_hash = config_hash(self.config)
        self._suite: Optional[BenchmarkSuite] = None
        self._base_accuracies: Dict[int, Dict[str, float]] = {}
        self.state_manager.initialize(str(uuid.uuid4()), self.config.experiment.name)

    @classmethod
    def with_default_stages(cls, config: ExperimentConfig = None) -> "ExperimentCoordinator":
        coordinator = cls(config)
        cfg = coordinator.config
        coordinator.register_stage("pretrain", PretrainStage(cfg))
        coordinator.register_stage("adapt", AdaptStage(cfg))
        coordinator.register_stage("ablate", AblationStage(cfg))
        coordinator.register_stage("analysis", AnalysisStage(cfg))
        return coordinator

    def register_stage(self, stage_id: str, stage: Any):
        """注册实验阶段"""
        self.stages[stage_id] = stage
        logger.debug("stage %s registered", stage_id)

    def _stage(self, stage_id: str):
        stage = self.stages.get(stage_id)
        if stage is None:
            raise RuntimeError(f"阶段 '{stage_id}' 未注册")
        return stage

    # ------------------------------------------------------------------
    # 路径与数据
    # ------------------------------------------------------------------

    @property
    def experiment_dir(self) -> Path:
        return Path(self.config.system.output_dir) / self.config.experiment.name

    def run_dir(self, seed: int) -> Path:
        return self.experiment_dir / f"seed-{seed}"

    def base_checkpoint(self, seed: int) -> Path:
        return self.run_dir(seed) / "base.ckpt"

    @property
    def suite(self) -> BenchmarkSuite:
        if self._suite is None:
            cfg = self.config
            self._suite = benchmark_suite(cfg.experiment.shift, cfg.data, cfg.data.seed)
            logger.info("benchmark suite: %d target, %d source benchmarks",
                        len(self._suite.target), len(self._suite.source))
        return self._suite

    def _require_base(self, seed: int) -> Path:
        path = self.base_checkpoint(seed)
        if not path.is_file():
            raise CheckpointError(f"基座检查点不存在: {path}（先运行 pretrain）")
        return path

    async def base_accuracies(self, seed: int) -> Dict[str, float]:
        """基座在全部评测基准上的准确率（按种子缓存）"""
        if seed not in self._base_accuracies:
            model = model_from_checkpoint(self._require_base(seed), self.config)
            self._base_accuracies[seed] = await self._stage("adapt").evaluate(model, self.suite.eval_sets())
        return self._base_accuracies[seed]

    def _manifest(self, command: str, strategy: str, seed: int, **kwargs) -> RunManifest:
        return RunManifest(command=command, experiment=self.config.experiment.name, strategy=strategy,
                           shift=self.config.experiment.shift, config_hash=self.config_hash, seed=seed,
                           datasets=sorted({**self.suite.target, **self.suite.source}), **kwargs)

    # ------------------------------------------------------------------
    # 阶段
    # ------------------------------------------------------------------

    async def _run_task(self, task: ExperimentTask, description: str, coro_factory):
        """带进度提示运行一个任务；失败时记录错误并重新抛出"""
        self.task_manager.set_status(task.id, TaskStatus.IN_PROGRESS)
        with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
                      console=console) as progress:
            spinner = progress.add_task(description, total=None)
            try:
                result = await coro_factory(progress, spinner)
            except Exception as e:
                self.task_manager.set_status(task.id, TaskStatus.FAILED)
                self.state_manager.add_error(f"{task.title}: {e}")
                console.print(f"[red]✗ {task.title} 失败: {e}[/red]")
                raise
            finally:
                progress.remove_task(spinner)
        self.task_manager.set_status(task.id, TaskStatus.COMPLETED)
        self.state_manager.update_progress(self.task_manager.get_progress())
        return result

    async def run_pretrain_phase(self, seed: int) -> RunManifest:
        """预训练基座并保存检查点"""
        console.print(f"\n[bold blue]🏗️  阶段: 源域预训练 (seed={seed})[/bold blue]")
        self.state_manager.set_phase("pretrain")
        task = self.task_manager.new_task(TaskType.PRETRAIN, f"pretrain seed={seed}", seed=seed)
        stage = self._stage("pretrain")

        async def _go(progress, spinner):
            progress.update(spinner, description="正在源域数据上训练基座模型...")
            return await stage.process({"suite": self.suite, "seed": seed,
                                        "checkpoint": self.base_checkpoint(seed)})

        outcome = await self._run_task(task, "准备源域数据...", _go)
        self.state_manager.add_file(outcome.checkpoint)
        manifest = self._manifest("pretrain", "pretrain", seed, checkpoint=str(outcome.checkpoint),
                                  checkpoint_hash=outcome.checkpoint_hash, metrics=outcome.accuracies,
                                  optimizer={"lr": self.config.pretrain.lr, "epochs": self.config.pretrain.epochs})
        manifest.files = [str(outcome.checkpoint)]
        await self._write_output({self.run_dir(seed) / "pretrain-manifest.json": _manifest_json(manifest)})

        console.print(f"[green]✓ 基座检查点: {outcome.checkpoint}[/green]")
        console.print(f"  - 训练步数: {outcome.result.steps}")
        for name, acc in sorted(outcome.accuracies.items()):
            console.print(f"  - {name}: {acc:.1f}")
        return manifest

    async def run_adapt_phase(self, strategy: Optional[str], seed: int, eval_only: Optional[Path] = None,
                              analyze: bool = True) -> AdaptationReport:
        """适应 + 评测 + （可选）分析，写出报告"""
        exp = self.config.experiment
        strategy = strategy or exp.strategy or DEFAULT_STRATEGY[exp.shift]
        if not eval_only:
            get_strategy(strategy)
        label = f"eval-{Path(eval_only).stem}" if eval_only else strategy
        console.print(f"\n[bold blue]🎯 阶段: 目标域适应 [{label}] (seed={seed})[/bold blue]")
        self.state_manager.set_phase("adapt")
        base_path = self._require_base(seed)
        pretrain = [t.id for t in self.task_manager.for_seed(seed, TaskType.PRETRAIN)]
        task = self.task_manager.new_task(TaskType.ADAPT, f"adapt {label} seed={seed}", dependencies=pretrain,
                                          strategy=label, seed=seed)
        stage = self._stage("adapt")
        out_dir = self.run_dir(seed) / label

        async def _go(progress, spinner):
            progress.update(spinner, description="正在评测基座模型...")
            base_accs = await self.base_accuracies(seed)
            if eval_only:
                progress.update(spinner, description=f"正在评测 {eval_only}...")
                outcome = await stage.evaluate_checkpoint(Path(eval_only), self.suite)
            else:
                progress.update(spinner, description=f"正在用 {strategy} 适应...")
                outcome = await stage.process({"base": base_path, "strategy": strategy, "seed": seed,
                                               "suite": self.suite, "checkpoint": out_dir / "expert.ckpt"})
            return base_accs, outcome

        base_accs, outcome = await self._run_task(task, "准备中...", _go)
        report = delta_metrics(
            base_accs, outcome.accuracies, list(self.suite.target), list(self.suite.source),
            strategy=label, shift=self.config.experiment.shift, seed=seed, config_hash=self.config_hash,
            trainable_params=0 if eval_only else outcome.trainable_params,
            checkpoint_hash=outcome.checkpoint_hash,
            loss_curve=outcome.result.loss_curve if outcome.result else [],
        )
        if analyze and not eval_only:
            report.analysis = await self.run_analysis_phase(base_path, outcome.model)

        manifest = self._manifest("adapt", label, seed, base_checkpoint=str(base_path),
                                  checkpoint=str(outcome.checkpoint) if outcome.checkpoint else None,
                                  checkpoint_hash=outcome.checkpoint_hash,
                                  metrics={"delta_target": report.delta_target,
                                           "delta_source": report.delta_source,
                                           "acc_target": report.acc_target_expert,
                                           "acc_source": report.acc_source_expert},
                                  optimizer=outcome.optimizer)
        files = {
            out_dir / "report.json": report_json(report),
            out_dir / "report.csv": report_csv(report),
            out_dir / "report.schema.json": report_schema(),
        }
        manifest.files = sorted(str(p) for p in files)
        files[out_dir / "manifest.json"] = _manifest_json(manifest)
        await self._write_output(files)
        self.state_manager.add_report(report)
        display_report(report)
        return report

    async def run_ablation_phase(self, axis: str, seed: int, audit_only: bool = False) -> List[AblationRow]:
        console.print(f"\n[bold blue]🔬 阶段: 消融扫描 [{axis}] (seed={seed})[/bold blue]")
        self.state_manager.set_phase("ablate")
        base_path = self._require_base(seed)
        task = self.task_manager.new_task(TaskType.ABLATE, f"ablate {axis} seed={seed}", axis=axis, seed=seed)
        stage = self._stage("ablate")

        async def _go(progress, spinner):
            base_accs = None if audit_only else await self.base_accuracies(seed)

            def on_cell(cell: str):
                progress.update(spinner, description=f"消融 {axis}: {cell}")

            return await stage.process({"base": base_path, "seed": seed, "suite": self.suite, "axis": axis,
                                        "base_accuracies": base_accs, "audit_only": audit_only,
                                        "on_cell": on_cell})

        rows = await self._run_task(task, "准备中...", _go)
        path = self.run_dir(seed) / f"ablation-{axis}.csv"
        await self._write_output({path: ablation_csv(rows)})
        self.state_manager.add_ablation(rows)
        display_ablation(rows)
        return rows

    async def run_analysis_phase(self, base_path: Path, expert) -> Dict[str, Any]:
        self.state_manager.set_phase("analyze")
        task = self.task_manager.new_task(TaskType.ANALYZE, "analysis")
        stage = self._stage("analysis")
        base = model_from_checkpoint(base_path, self.config)

        async def _go(progress, spinner):
            return await stage.process({"base": base, "expert": expert})

        return await self._run_task(task, "正在分析嵌入与注意力...", _go)

    # ------------------------------------------------------------------
    # 入口
    # ------------------------------------------------------------------

    async def pretrain(self) -> List[RunManifest]:
        _banner(f"🧪 {self.config.experiment.name}: 预训练", "cyan")
        return [await self.run_pretrain_phase(seed) for seed in self.config.experiment.seeds]

    async def adapt(self, strategy: Optional[str] = None, eval_only: Optional[Path] = None,
                    analyze: bool = True) -> List[AdaptationReport]:
        _banner(f"🧪 {self.config.experiment.name}: 适应", "cyan")
        return [await self.run_adapt_phase(strategy, seed, eval_only, analyze)
                for seed in self.config.experiment.seeds]

    async def ablate(self, axis: str, audit_only: bool = False) -> List[AblationRow]:
        _banner(f"🧪 {self.config.experiment.name}: 消融 {axis}", "cyan")
        rows: List[AblationRow] = []
        for seed in self.config.experiment.seeds:
            rows.extend(await self.run_ablation_phase(axis, seed, audit_only))
        return rows

    async def export_embeddings(self, checkpoint: Path, output: Path,
                                projected: Optional[Path] = None) -> Dict[str, Any]:
        """导出成对嵌入 CSV；给定外部投影坐标时在投影空间计算 BD/PSD"""
        if projected is not None:
            groups = load_embeddings_csv(projected)
            src, tgt, ids = aligned_pairs(groups)
            bd, psd = paired_embedding_stats(src, tgt, ids, ids, self.config.analysis.cov_eps_scale)
            console.print(f"[green]✓ 投影空间: BD={bd:.4f}, PSD={psd:.4f} ({len(ids)} 对)[/green]")
            return {"bd": bd, "psd": psd, "pairs": len(ids)}

        model = model_from_checkpoint(checkpoint, self.config)
        source, target = paired_samples(self.config, self.config.analysis.embedding_samples)
        src_ids, src = collect_embeddings(model, source)
        tgt_ids, tgt = collect_embeddings(model, target)
        path = export_embeddings_csv(output, src_ids + tgt_ids, ["source"] * len(src_ids) + ["target"] * len(tgt_ids),
                                     np.concatenate([src, tgt]))
        self.state_manager.add_file(path)
        console.print(f"[green]✓ 已导出 {len(src_ids)} 对嵌入: {path}[/green]")
        return {"path": str(path), "pairs": len(src_ids)}

    async def export_datasets(self, output: Path) -> Dict[str, int]:
        """把当前位移的全部基准写成数据集目录（manifest.json + .npy），读回核对后返回样本数"""
        output = Path(output)
        counts: Dict[str, int] = {}
        table = Table(title=f"数据集 · {self.config.experiment.shift}")
        table.add_column("基准", style="cyan")
        table.add_column("train", justify="right")
        table.add_column("eval", justify="right")
        for name, bench in sorted({**self.suite.source, **self.suite.target}.items()):
            directory = output / name
            manifest = await asyncio.to_thread(save_dataset, bench, directory)
            loaded = await asyncio.to_thread(load_dataset, directory)
            if [s.pair_id for s in loaded.samples] != [s.pair_id for s in bench.samples]:
                raise DatasetError(f"{directory}: 读回的样本与写出的不一致")
            self.state_manager.add_file(manifest)
            counts[name] = len(loaded.samples)
            table.add_row(name, str(len(loaded.train)), str(len(loaded.eval)))
        console.print(table)
        console.print(f"[green]✓ 已导出 {len(counts)} 个数据集: {output}[/green]")
        logger.info("exported %d datasets to %s", len(counts), output)
        return counts

    def render_report(self) -> str:
        """汇总实验目录下的全部报告与消融 CSV 为 Markdown"""
        reports = [AdaptationReport.model_validate_json(p.read_text(encoding="utf-8"))
                   for p in sorted(self.experiment_dir.glob("seed-*/*/report.json"))]
        ablation: List[AblationRow] = []
        for path in sorted(self.experiment_dir.glob("seed-*/ablation-*.csv")):
            with path.open(newline="", encoding="utf-8") as f:
                for raw in csv.DictReader(f):
                    ablation.append(AblationRow(
                        axis=raw["axis"], cell=raw["cell"], strategy=raw["strategy"],
                        trainable_params=int(raw["trainable_params"]), config_hash=raw["config_hash"],
                        seed=int(raw["seed"]),
                        delta_target=float(raw["delta_target"]) if raw["delta_target"] else None,
                        delta_source=float(raw["delta_source"]) if raw["delta_source"] else None,
                    ))
        return MARKDOWN_TEMPLATE.render(name=self.config.experiment.name, shift=self.config.experiment.shift,
                                        config_hash=self.config_hash, reports=reports, ablation=ablation)

    async def _write_output(self, files: Dict[Path, str]):
        """将产物写入输出目录"""
        for path, content in files.items():
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            async with aiofiles.open(path, "w", encoding="utf-8") as f:
                await f.write(content)
            self.state_manager.add_file(path)

        console.print(f"[dim]已写入 {len(files)} 个文件[/dim]")


def _manifest_json(manifest: RunManifest) -> str:
    return json.dumps(manifest.model_dump(mode="json"), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _banner(title: str, color: str):
    console.print(f"\n[bold {color}]═══════════════════════════════════════════════════[/bold {color}]")
    console.print(f"[bold {color}]       {title}[/bold {color}]")
    console.print(f"[bold {color}]═══════════════════════════════════════════════════[/bold {color}]")


def display_report(report: AdaptationReport):
    table = Table(title=f"{report.strategy} · {report.shift} · seed {report.seed}")
    table.add_column("基准", style="cyan")
    table.add_column("split", style="magenta")
    table.add_column("base", justify="right")
    table.add_column("expert", justify="right")
    for row in report.rows():
        table.add_row(row.benchmark, row.split, f"{row.base_acc:.1f}", f"{row.expert_acc:.1f}")
    console.print(table)
    color = "green" if report.delta_source >= 0 else "yellow"
    console.print(f"  Δ_target = [bold]{report.delta_target:+.2f}[/bold]  "
                  f"Δ_source = [bold {color}]{report.delta_source:+.2f}[/bold {color}]  "
                  f"(可训练参数 {report.trainable_params})")


def display_ablation(rows: List[AblationRow]):
    table = Table(title="消融结果")
    for col in ("格", "策略", "可训练参数", "Δ_target", "Δ_source"):
        table.add_column(col)
    for r in rows:
        table.add_row(r.cell, r.strategy, str(r.trainable_params), _num(r.delta_target), _num(r.delta_source))
    console.print(table)
