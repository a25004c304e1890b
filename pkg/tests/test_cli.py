"""
命令行入口测试 - 退出码与子命令
"""
import pytest
import yaml

import main as cli
from coordinator import ExperimentCoordinator
from vlm.domains import load_dataset
from vlm.trainer import NumericAbort

from .conftest import TINY


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    return path


@pytest.mark.asyncio
async def test_strategies_lists_presets(capsys):
    assert await cli.main(["strategies"]) == cli.EXIT_OK
    assert "viscop-llm-full" in capsys.readouterr().out


@pytest.mark.asyncio
async def test_dump_config_writes_yaml(capsys):
    assert await cli.main(["dump-config", "--name", "demo", "--shift", "task"]) == cli.EXIT_OK
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["experiment"] == {"name": "demo", "shift": "task", "strategy": None, "seeds": [0]}
    assert data["encoder"]["d_v"] == 32


@pytest.mark.asyncio
async def test_bad_config_exits_with_config_code(tmp_path):
    assert await cli.main(["pretrain", "-c", str(tmp_path / "missing.yaml")]) == cli.EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment:\n  name: x\n  shift: sideways\n", encoding="utf-8")
    assert await cli.main(["pretrain", "-c", str(bad)]) == cli.EXIT_CONFIG


@pytest.mark.asyncio
async def test_unknown_strategy_exits_with_config_code(config_file, tmp_path):
    code = await cli.main(["adapt", "-c", str(config_file), "--strategy", "nope",
                           "--output-root", str(tmp_path / "runs")])
    assert code == cli.EXIT_CONFIG


@pytest.mark.asyncio
async def test_adapt_without_base_checkpoint(config_file, tmp_path):
    code = await cli.main(["adapt", "-c", str(config_file), "--output-root", str(tmp_path / "runs")])
    assert code == cli.EXIT_CONFIG


@pytest.mark.asyncio
async def test_export_embeddings_needs_an_input(config_file, tmp_path):
    code = await cli.main(["export-embeddings", "-c", str(config_file), "--output-root", str(tmp_path)])
    assert code == cli.EXIT_CONFIG


@pytest.mark.asyncio
async def test_numeric_abort_exits_with_numeric_code(config_file, tmp_path, monkeypatch):
    async def explode(self):
        raise NumericAbort(3, float("nan"))

    monkeypatch.setattr(ExperimentCoordinator, "pretrain", explode)
    code = await cli.main(["pretrain", "-c", str(config_file), "--output-root", str(tmp_path)])
    assert code == cli.EXIT_NUMERIC


@pytest.mark.asyncio
async def test_pretrain_then_audit_ablation_and_report(config_file, tmp_path):
    runs = tmp_path / "runs"
    common = ["-c", str(config_file), "--output-root", str(runs), "--seeds", "1"]
    assert await cli.main(["pretrain", *common]) == cli.EXIT_OK
    assert (runs / "tiny" / "seed-1" / "base.ckpt").is_file()
    assert await cli.main(["ablate", *common, "--axis", "placement", "--audit-only"]) == cli.EXIT_OK
    assert (runs / "tiny" / "seed-1" / "ablation-placement.csv").is_file()
    assert await cli.main(["ablate", *common, "--axis", "depth", "--audit-only"]) == cli.EXIT_CONFIG
    out = tmp_path / "report.md"
    assert await cli.main(["report", *common, "-o", str(out)]) == cli.EXIT_OK
    assert "every-2" in out.read_text(encoding="utf-8")


@pytest.mark.asyncio
async def test_export_datasets_writes_loadable_directories(config_file, tmp_path):
    out = tmp_path / "datasets"
    code = await cli.main(["export-datasets", "-c", str(config_file), "--output-root", str(tmp_path / "runs"),
                           "-o", str(out)])
    assert code == cli.EXIT_OK
    source = load_dataset(out / "source" / "color")
    target = load_dataset(out / "target" / "color")
    assert (source.domain, target.domain) == ("source", "target")
    assert (len(source.train), len(source.eval)) == (16, 4)
    assert [s.pair_id for s in source.samples] == [s.pair_id for s in target.samples]
    assert target.samples[0].frames.shape == (2, 3, 16, 16)
