"""
视觉探针与交互模块测试
"""
import dataclasses

import numpy as np
import pytest

from vlm.analysis import MetricError, probe_attention_map
from vlm.encoder import LayerActivations
from vlm.layers import multi_head_attention
from vlm.numerics import Tensor, XorShiftRng, add, analytic_gradients, matmul, numeric_gradient, sum_all
from vlm.probes import (
    InteractionModule, ProbeBank, VisualProbing, init_interaction, interaction_step, run_probes,
)

from .conftest import assert_close


def test_probes_flow_through_all_layers(probed_model, frames):
    cfg = probed_model.cfg
    acts = probed_model.encode(frames)
    record = {}
    out = probed_model.probing(acts, record)
    assert out.shape == (cfg.probes.num_probes, cfg.encoder.d_v)
    assert sorted(record) == list(range(1, cfg.encoder.layers + 1))
    for weights in record.values():
        assert weights.shape == (cfg.encoder.heads, cfg.probes.num_probes, acts.frames * acts.tokens_per_frame)
        np.testing.assert_allclose(weights.sum(axis=2), 1.0)


def test_interaction_is_initialised_from_encoder_copy(probed_model):
    encoder = probed_model.encoder
    phi = probed_model.probing.modules[1]
    original = encoder.params["layers.1.attn.wq"]
    np.testing.assert_array_equal(phi.wq.data, original.data)
    assert phi.wq is not original
    phi.wq.data[0, 0] += 1.0
    assert phi.wq.data[0, 0] != original.data[0, 0]


def test_without_interaction_probes_are_unchanged(cfg, model, frames):
    probe_cfg = dataclasses.replace(cfg.probes, interaction=False)
    probing = VisualProbing.from_encoder(model.encoder, probe_cfg, XorShiftRng(3))
    assert probing.placement == []
    out = probing(model.encode(frames))
    np.testing.assert_array_equal(out.data, probing.bank.probes.data)
    names = [n for n, _ in probing.named_parameters()]
    assert names == ["probes.p0"]


def test_single_probe_and_last_layer_placement(cfg, model, frames):
    probe_cfg = dataclasses.replace(cfg.probes, num_probes=1, placement="last")
    probing = VisualProbing.from_encoder(model.encoder, probe_cfg, XorShiftRng(3))
    assert probing.placement == [cfg.encoder.layers]
    assert probing(model.encode(frames)).shape == (1, cfg.encoder.d_v)


def test_probe_bank_requires_at_least_one_probe():
    with pytest.raises(ValueError):
        ProbeBank(0, 8, XorShiftRng(0))


def test_spatial_scope_averages_per_frame_attention(cfg, model, frames):
    acts = model.encode(frames)
    phi = init_interaction(model.encoder, 1, dataclasses.replace(cfg.probes, scope="spatial"))
    bank = ProbeBank(3, cfg.encoder.d_v, XorShiftRng(1))
    record = []
    out = interaction_step(phi, bank.probes, acts[1], acts.frames, record)
    assert out.shape == (3, cfg.encoder.d_v)
    # 每帧各自归一化，再除以帧数
    np.testing.assert_allclose(record[0].sum(axis=2), 1.0)


def test_non_residual_update_drops_probe_input(cfg, model, frames):
    acts = model.encode(frames)
    phi = init_interaction(model.encoder, 1, dataclasses.replace(cfg.probes, residual=False))
    bank = ProbeBank(2, cfg.encoder.d_v, XorShiftRng(1))
    residual = init_interaction(model.encoder, 1, cfg.probes)
    with_res = interaction_step(residual, bank.probes, acts[1], acts.frames).data
    without = interaction_step(phi, bank.probes, acts[1], acts.frames).data
    np.testing.assert_allclose(with_res - without, bank.probes.data)


def test_interaction_gradients_match_finite_differences(cfg, model, frames):
    acts = model.encode(frames)
    phi = init_interaction(model.encoder, 2, cfg.probes)
    bank = ProbeBank(2, cfg.encoder.d_v, XorShiftRng(1), init_std=0.5)

    def loss_fn():
        return sum_all(interaction_step(phi, bank.probes, acts[2], acts.frames))

    indices = [(0, 0), (3, 5), (7, 1)]
    for target in (phi.wq, phi.wk, bank.probes):
        (analytic,) = analytic_gradients(loss_fn, [target])
        idx = [i for i in indices if i[0] < target.shape[0] and i[1] < target.shape[1]]
        numeric = numeric_gradient(loss_fn, target, indices=idx)
        for pos in idx:
            assert analytic[pos] == pytest.approx(numeric[pos], rel=1e-5, abs=1e-7)


def test_probe_attention_map_is_a_distribution(probed_model, frames):
    maps = probe_attention_map(probed_model, frames)
    side = probed_model.encoder.cfg.grid_side
    assert sorted(maps) == probed_model.probing.placement
    for m in maps.values():
        assert m.shape == (2, side, side)
        assert m.sum() == pytest.approx(1.0)


def test_probe_attention_map_requires_probes(model, frames):
    with pytest.raises(MetricError):
        probe_attention_map(model, frames)


def _identity_phi(d=4, **kwargs):
    def eye():
        return Tensor(np.eye(d), requires_grad=True)
    return InteractionModule(layer=1, wq=eye(), wk=eye(), wv=eye(), wo=eye(), heads=1, **kwargs)


def _chain(modules, start, acts):
    """逐层手工组合，返回每层之后的状态"""
    states = []
    p = start
    for ell in sorted(modules):
        p = interaction_step(modules[ell], p, acts[ell], acts.frames)
        states.append(p.data.copy())
    return states


def test_single_token_update_adds_its_value():
    rng = XorShiftRng(4)
    p = Tensor(rng.normal((1, 4)))
    x = Tensor(rng.normal((1, 4)))
    out = interaction_step(_identity_phi(), p, x, frames=1)
    assert_close(out.data, p.data + x.data, tol=1e-12)


def test_orthogonal_query_attends_uniformly():
    p = Tensor([[1.0, 0.0, 0.0, 0.0]])
    x = Tensor([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    record = []
    out = interaction_step(_identity_phi(), p, x, frames=1, record=record)
    assert_close(out.data, [[1.0, 0.5, 0.5, 0.0]], tol=1e-12)
    assert_close(record[0], [[[0.5, 0.5]]], tol=1e-12)


def test_duplicated_frames_make_scopes_agree():
    rng = XorShiftRng(5)
    weights = {proj: Tensor(rng.normal((4, 4), std=0.5), requires_grad=True) for proj in ("wq", "wk", "wv", "wo")}
    joint = InteractionModule(layer=1, heads=2, scope="spatio-temporal", **weights)
    spatial = dataclasses.replace(joint, scope="spatial")
    frame = rng.normal((4, 4))
    x = Tensor(np.concatenate([frame, frame]))
    p = Tensor(rng.normal((3, 4)))
    assert_close(interaction_step(joint, p, x, frames=2).data, interaction_step(spatial, p, x, frames=2).data,
                 tol=1e-12)


def test_interaction_matches_encoder_attention_formula(cfg, model, frames):
    acts = model.encode(frames)
    p = ProbeBank(3, cfg.encoder.d_v, XorShiftRng(1), init_std=0.5).probes
    for ell in (1, 2):
        phi = init_interaction(model.encoder, ell, dataclasses.replace(cfg.probes, residual=False))
        w = model.encoder.layer_attention_weights(ell)
        x = acts[ell]
        expected = multi_head_attention(matmul(p, w["wq"]), matmul(x, w["wk"]), matmul(x, w["wv"]), w["wo"],
                                        cfg.encoder.heads)
        assert_close(phi(p, x, acts.frames).data, expected.data, tol=1e-12)


def test_layer_chain_matches_manual_composition(probed_model, frames):
    acts = probed_model.encode(frames)
    probing = probed_model.probing
    states = _chain(probing.modules, probing.bank.probes, acts)
    np.testing.assert_array_equal(run_probes(probing.bank, probing.modules, acts).data, states[-1])


def test_zero_output_projection_keeps_initial_state(probed_model, frames):
    probing = probed_model.probing
    for module in probing.modules.values():
        module.wo.data[:] = 0.0
    out = probing(probed_model.encode(frames))
    np.testing.assert_array_equal(out.data, probing.bank.probes.data)


def test_perturbing_a_layer_only_affects_later_updates(probed_model, frames):
    acts = probed_model.encode(frames)
    probing = probed_model.probing
    assert probing.placement == [1, 2]
    bumped = acts[2].data.copy()
    bumped[0] += 1.0
    perturbed = LayerActivations(layers=[acts[1], Tensor(bumped)], frames=acts.frames,
                                 tokens_per_frame=acts.tokens_per_frame)
    clean = _chain(probing.modules, probing.bank.probes, acts)
    shifted = _chain(probing.modules, probing.bank.probes, perturbed)
    np.testing.assert_array_equal(clean[0], shifted[0])
    assert not np.allclose(clean[1], shifted[1])


def test_attention_ignores_constant_logit_shift():
    rng = XorShiftRng(6)
    q, k, v = Tensor(rng.normal((3, 4))), Tensor(rng.normal((5, 4))), Tensor(rng.normal((5, 4)))
    wo = Tensor(rng.normal((4, 4)))
    # 所有 key 加同一个向量：每个 query 的 logit 整行平移同一个常数
    shifted_k = add(k, Tensor(rng.normal(4)))
    base_w, shift_w = [], []
    base = multi_head_attention(q, k, v, wo, heads=2, record=base_w)
    moved = multi_head_attention(q, shifted_k, v, wo, heads=2, record=shift_w)
    assert_close(base.data, moved.data, tol=1e-10)
    assert_close(base_w[0], shift_w[0], tol=1e-12)
