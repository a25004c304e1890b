"""
适应策略、门控与训练测试
"""
import dataclasses

import numpy as np
import pytest

from config import TrainConfig, default_config
from vlm.analysis import MetricError
from vlm.domains import build_vocabulary, make_benchmark
from vlm.model import build_model
from vlm.numerics import GradTape, Tensor, no_tape
from vlm.trainer import (
    DEFAULT_STRATEGY, PRESETS, PRETRAIN_STRATEGY, Adam, AdaptationStrategy, NumericAbort, StrategyError,
    apply_strategy, evaluate_accuracy, get_strategy, group_members, train, verify_frozen,
)

from .conftest import tiny_config


@pytest.fixture
def samples(cfg):
    return make_benchmark(20, "view", "color", cfg.data, seed=0).train[:8]


def _trainable(strategy: str, cfg=default_config) -> int:
    model = build_model(cfg, build_vocabulary(), seed=0)
    apply_strategy(model, get_strategy(strategy), cfg.train)
    return model.parameter_count(trainable_only=True)


def test_all_presets_are_registered():
    assert set(PRESETS) == {
        "vlc-only", "vlc-ve", "vlc-ve-llm", "vlc-llm-lora", "viscop", "viscop-llm-full",
        "vp-only", "vlc-ve-lora-llm-lora", "vlc-last4-llm-lora", "qformer",
    }
    for strategy in PRESETS.values():
        strategy.validate_groups()
    assert set(DEFAULT_STRATEGY.values()) <= set(PRESETS)
    assert get_strategy("pretrain") is PRETRAIN_STRATEGY


def test_unknown_strategy_and_group():
    with pytest.raises(StrategyError):
        get_strategy("full-finetune")
    with pytest.raises(StrategyError):
        AdaptationStrategy(name="bad", groups=["VL-C", "Adapter"]).validate_groups()
    with pytest.raises(StrategyError):
        AdaptationStrategy(name="bad", groups=["VL-C"], lr_multipliers={"VE-full": 0.2}).validate_groups()


def test_trainable_parameter_counts_on_default_config():
    counts = {name: _trainable(name) for name in ("vlc-only", "vlc-llm-lora", "viscop", "qformer", "vlc-ve-llm")}
    assert counts["vlc-only"] == 6272
    assert counts["vlc-llm-lora"] == 10368
    assert counts["viscop"] == 41728
    assert counts["qformer"] == 21248
    assert counts["vlc-only"] < counts["vlc-llm-lora"] < counts["viscop"] < counts["vlc-ve-llm"]


def test_vp_only_has_probes_but_no_interaction(cfg, vocab):
    model = build_model(cfg, vocab)
    audit = apply_strategy(model, get_strategy("vp-only"), cfg.train)
    assert model.has_probes
    assert "probes.p0" in audit.trainable
    assert not any(n.startswith("interaction.") for n in audit.trainable)
    assert model.probe_cfg.interaction is False


def test_gating_sets_requires_grad_and_learning_rates(cfg, vocab):
    model = build_model(cfg, vocab)
    audit = apply_strategy(model, get_strategy("vlc-ve"), cfg.train)
    params = model.parameters()
    assert all(params[n].requires_grad for n in audit.trainable)
    assert not any(params[n].requires_grad for n in audit.frozen)
    assert audit.learning_rates["connector.w1"] == pytest.approx(cfg.train.lr)
    assert audit.learning_rates["encoder.patch.w"] == pytest.approx(cfg.train.ve_lr)
    assert not any(n.startswith("encoder.lora.") for n in audit.trainable)


def test_ve_last_four_covers_final_layers_only(vocab):
    model = build_model(default_config, vocab)
    members = group_members(model, "VE-Last-4")
    layers = {int(n.split(".")[2]) for n in members}
    assert layers == {3, 4, 5, 6}


def test_lora_group_without_rank_is_rejected(vocab):
    cfg = tiny_config(decoder={"lora_rank": 0})
    model = build_model(cfg, vocab)
    with pytest.raises(StrategyError):
        apply_strategy(model, get_strategy("vlc-llm-lora"), cfg.train)


def test_training_keeps_frozen_parameters_intact(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    audit = apply_strategy(model, get_strategy("viscop"), cfg.train)
    before = {n: model.parameters()[n].data.copy() for n in audit.trainable}
    clip = samples[0].frames
    acts_before = [t.data.copy() for t in model.encode(clip).layers]

    result = train(model, samples[:2], audit, dataclasses.replace(cfg.train, epochs=100, batch_size=1))
    assert result.frozen_intact
    assert verify_frozen(model, audit)
    assert result.steps == 200
    assert len(result.loss_curve) == 200
    changed = [n for n in audit.trainable if not np.array_equal(before[n], model.parameters()[n].data)]
    assert "probes.p0" in changed
    assert any(n.startswith("connector.") for n in changed)
    # 编码器各层输出逐位不变
    for old, new in zip(acts_before, model.encode(clip).layers):
        np.testing.assert_array_equal(old, new.data)


def test_backward_leaves_frozen_encoder_without_gradients(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    audit = apply_strategy(model, get_strategy("viscop"), cfg.train)
    s = samples[0]
    with GradTape() as tape:
        tape.backward(model.loss(s.frames, s.question, s.answer))
        tape.clear()
    params = model.parameters()
    frozen_encoder = [n for n in audit.frozen if n.startswith("encoder.")]
    assert frozen_encoder
    assert all(params[n].grad is None for n in frozen_encoder)
    assert params["probes.p0"].grad is not None
    interaction = [n for n in params if n.startswith("interaction.")]
    assert interaction
    assert all(params[n].grad is not None for n in interaction)


def _overfit_strategy(model, train_cfg):
    # 编码器冻结：训练时使用缓存的激活
    return apply_strategy(model, AdaptationStrategy(name="overfit", groups=["VL-C", "LLM-full"]), train_cfg)


def test_single_sample_is_memorised(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    train_cfg = dataclasses.replace(cfg.train, epochs=500, batch_size=1, lr=0.02)
    audit = _overfit_strategy(model, train_cfg)
    s = samples[0]
    result = train(model, [s], audit, train_cfg)
    assert result.steps == 500
    assert result.loss_curve[499] <= result.loss_curve[49]
    with no_tape():
        assert model.loss(s.frames, s.question, s.answer).item() < 1e-3
    assert model.generate(s.frames, s.question) == list(s.answer)


def test_loss_halves_on_small_training_set(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    train_cfg = dataclasses.replace(cfg.train, epochs=200, batch_size=8)
    audit = _overfit_strategy(model, train_cfg)
    result = train(model, samples, audit, train_cfg)
    assert result.steps == 200
    assert result.loss_curve[-1] <= 0.5 * result.loss_curve[0]


def test_training_is_deterministic(cfg, vocab, samples):
    curves = []
    for _ in range(2):
        model = build_model(cfg, vocab, seed=5)
        audit = apply_strategy(model, get_strategy("vlc-llm-lora"), cfg.train)
        curves.append(train(model, samples, audit, cfg.train).loss_curve)
    assert curves[0] == curves[1]


def test_max_steps_limits_training(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    audit = apply_strategy(model, get_strategy("vlc-only"), cfg.train)
    result = train(model, samples, audit, dataclasses.replace(cfg.train, epochs=5, batch_size=2, max_steps=3))
    assert result.steps == 3


def test_non_finite_loss_aborts(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    audit = apply_strategy(model, get_strategy("vlc-only"), cfg.train)
    model.decoder.params["head"].data[:] = np.nan
    with pytest.raises(NumericAbort) as info:
        train(model, samples, audit, cfg.train)
    assert info.value.step == 0


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0])
    Adam({"w": p}, {"w": 0.1}, TrainConfig()).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_evaluate_accuracy_bounds(cfg, vocab, samples):
    model = build_model(cfg, vocab)
    acc = evaluate_accuracy(model, samples)
    assert 0.0 <= acc <= 1.0
    with pytest.raises(MetricError):
        evaluate_accuracy(model, [])
