"""
共享测试夹具 - 极小模型配置，保证整个测试集在 CPU 上很快跑完
"""
import dataclasses

import numpy as np
import pytest

from config import ExperimentConfig, parse_config
from vlm.domains import build_vocabulary
from vlm.model import build_model
from vlm.numerics import XorShiftRng

TINY = {
    "experiment": {"name": "tiny", "shift": "view", "seeds": [0]},
    # 16×16 场景、8×8 patch → 每帧 2×2 个 token
    "encoder": {"image_side": 16, "patch_side": 8, "d_v": 8, "layers": 2, "heads": 2,
                "mlp_ratio": 2.0, "lora_rank": 2, "lora_alpha": 4.0, "init_std": 0.1},
    "probes": {"num_probes": 2},
    "connector": {"downsample": 2, "hidden": 8},
    "decoder": {"d_lm": 16, "layers": 2, "heads": 2, "context": 48, "mlp_ratio": 2.0,
                "lora_rank": 2, "lora_alpha": 4.0, "init_std": 0.1, "max_answer_len": 3},
    "pretrain": {"epochs": 1, "batch_size": 8, "lr": 0.01},
    "train": {"epochs": 1, "batch_size": 8, "lr": 0.01, "ve_lr": 0.002},
    "data": {"frames": 2, "samples_per_family": 20, "families": ["color"]},
    "analysis": {"embedding_samples": 12},
    "system": {"eval_workers": 2},
}


def tiny_config(**sections) -> ExperimentConfig:
    """TINY 基础上按段覆盖"""
    data = {k: dict(v) for k, v in TINY.items()}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return parse_config(data, "<tiny>")


@pytest.fixture
def cfg() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def vocab():
    return build_vocabulary()


@pytest.fixture
def model(cfg, vocab):
    return build_model(cfg, vocab, seed=0)


@pytest.fixture
def probed_model(cfg, vocab):
    return build_model(cfg, vocab, seed=0, with_probes=True)


@pytest.fixture
def frames():
    """T=2 的随机视频"""
    return XorShiftRng(123).uniform((2, 3, 16, 16))


@pytest.fixture
def output_cfg(tmp_path):
    return tiny_config(system={"output_dir": str(tmp_path / "runs"), "eval_workers": 2})


def replace_section(cfg: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})


def assert_close(a, b, tol=1e-9):
    np.testing.assert_allclose(np.asarray(a), np.asarray(b), rtol=0, atol=tol)
