"""
VisCoP 桌面级域适应实验 - 主入口
"""
import argparse
import asyncio
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table

from config import SHIFTS, ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from coordinator import ExperimentCoordinator
from stages.ablate import ABLATION_AXES
from vlm.domains import DatasetError
from vlm.model import CheckpointError
from vlm.numerics import NumericError
from vlm.trainer import DEFAULT_STRATEGY, PRESETS, NumericAbort, StrategyError

console = Console()

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def setup_logging(level: str):
    logging.basicConfig(
        level=level.upper(),
        format="%(name)s: %(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="VisCoP 域适应实验：预训练基座、适应、消融与分析",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python main.py pretrain -c configs/view.yaml
  python main.py adapt -c configs/view.yaml --strategy viscop
  python main.py ablate -c configs/view.yaml --axis alternatives --audit-only
  python main.py report -c configs/view.yaml -o report.md
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser, required: bool = True):
        p.add_argument("--config", "-c", type=str, required=required, help="YAML 配置文件路径")
        p.add_argument("--seeds", type=int, nargs="+", help="覆盖 experiment.seeds")
        p.add_argument("--output-root", type=str, help="覆盖 system.output_dir（也可用 VISCOP_OUTPUT_ROOT）")
        return p

    with_config(sub.add_parser("pretrain", help="源域预训练基座模型"))

    adapt = with_config(sub.add_parser("adapt", help="目标域适应并写出报告"))
    adapt.add_argument("--strategy", "-s", type=str, help="策略名（默认按位移类型选择）")
    adapt.add_argument("--eval-only", type=str, metavar="CKPT", help="只评测已有专家检查点（迁移设定）")
    adapt.add_argument("--no-analysis", action="store_true", help="跳过嵌入与注意力分析")

    ablate = with_config(sub.add_parser("ablate", help="消融扫描"))
    ablate.add_argument("--axis", "-a", type=str, required=True, help=f"消融轴: {', '.join(ABLATION_AXES)}")
    ablate.add_argument("--audit-only", action="store_true", help="只统计可训练参数，不训练")

    export = with_config(sub.add_parser("export-embeddings", help="导出成对嵌入 CSV / 计算投影空间 BD"))
    export.add_argument("--checkpoint", type=str, help="模型检查点")
    export.add_argument("--output", "-o", type=str, default="embeddings.csv", help="输出 CSV")
    export.add_argument("--projected", type=str, help="外部投影坐标 CSV（pair_id, domain, x, y）")

    datasets = with_config(sub.add_parser("export-datasets", help="把当前位移的源/目标基准写成数据集目录"))
    datasets.add_argument("--output", "-o", type=str, default="datasets", help="输出目录")

    report = with_config(sub.add_parser("report", help="汇总报告为 Markdown"))
    report.add_argument("--output", "-o", type=str, help="输出文件（默认打印）")

    sub.add_parser("strategies", help="列出全部适应策略")

    dump = sub.add_parser("dump-config", help="导出含全部默认值的配置")
    dump.add_argument("--config", "-c", type=str, help="在该配置的基础上补全默认值")
    dump.add_argument("--name", type=str, default="default", help="experiment.name")
    dump.add_argument("--shift", type=str, default="view", choices=SHIFTS, help="experiment.shift")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seeds", None):
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, seeds=list(args.seeds)))
    if getattr(args, "output_root", None):
        cfg = dataclasses.replace(cfg, system=dataclasses.replace(cfg.system, output_dir=args.output_root))
    return cfg


def show_strategies():
    table = Table(title="适应策略")
    table.add_column("名称", style="cyan")
    table.add_column("参数组", style="green")
    table.add_column("说明")
    for name, strategy in PRESETS.items():
        default_for = [shift for shift, s in DEFAULT_STRATEGY.items() if s == name]
        note = strategy.description + (f"（{'/'.join(default_for)} 默认）" if default_for else "")
        table.add_row(name, ", ".join(strategy.groups), note)
    console.print(table)


async def dispatch(args: argparse.Namespace) -> int:
    if args.command == "strategies":
        show_strategies()
        return EXIT_OK
    if args.command == "dump-config":
        cfg = load_config(args.config) if args.config else parse_config(
            {"experiment": {"name": args.name, "shift": args.shift}})
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK

    cfg = resolve_config(args)
    setup_logging(cfg.system.log_level)
    coordinator = ExperimentCoordinator.with_default_stages(cfg)

    if args.command == "pretrain":
        await coordinator.pretrain()
    elif args.command == "adapt":
        if args.strategy and args.eval_only:
            raise StrategyError("--strategy 与 --eval-only 不能同时使用")
        await coordinator.adapt(args.strategy, Path(args.eval_only) if args.eval_only else None,
                                analyze=not args.no_analysis)
    elif args.command == "ablate":
        await coordinator.ablate(args.axis, audit_only=args.audit_only)
    elif args.command == "export-embeddings":
        if not args.checkpoint and not args.projected:
            raise ConfigError("export-embeddings 需要 --checkpoint 或 --projected")
        await coordinator.export_embeddings(Path(args.checkpoint) if args.checkpoint else None,
                                            Path(args.output), Path(args.projected) if args.projected else None)
    elif args.command == "export-datasets":
        await coordinator.export_datasets(Path(args.output))
    elif args.command == "report":
        text = coordinator.render_report()
        if args.output:
            Path(args.output).write_text(text, encoding="utf-8")
            console.print(f"[green]✓ 报告已写入 {args.output}[/green]")
        else:
            console.print(text, markup=False)
    return EXIT_OK


async def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)
    if args.command not in ("strategies", "dump-config"):
        console.print(Panel.fit(
            "[bold cyan]🔭 VisCoP 域适应实验[/bold cyan]\n"
            "[dim]冻结视觉编码器 + 视觉探针，在目标域上学习而不遗忘源域[/dim]",
            border_style="cyan"
        ))
    try:
        return await dispatch(args)
    except (ConfigError, StrategyError, DatasetError, CheckpointError) as e:
        console.print(f"\n[bold red]❌ 配置错误: {e}[/bold red]")
        return EXIT_CONFIG
    except (NumericAbort, NumericError) as e:
        console.print(f"\n[bold red]❌ 数值错误: {e}[/bold red]")
        return EXIT_NUMERIC


def run():
    """同步运行入口"""
    sys.exit(asyncio.run(main()))


if __name__ == "__main__":
    run()
