"""
连接器测试
"""
import numpy as np
import pytest

from config import ConnectorConfig
from vlm.connectors import MlpConnector, build_connectors, pooling_matrix, project_visual, spatial_downsample
from vlm.numerics import (
    DimensionError, Tensor, XorShiftRng, analytic_gradients, mul, numeric_gradient, sum_all,
)


def test_pooling_matrix_averages_blocks_per_frame():
    pool = pooling_matrix(frames=2, grid_side=4, s=2)
    assert pool.shape == (8, 32)
    np.testing.assert_allclose(pool.sum(axis=1), 1.0)
    # 第 0 帧左上 2×2 块：token 0, 1, 4, 5
    assert set(np.flatnonzero(pool[0])) == {0, 1, 4, 5}
    # 第 1 帧右下块
    assert set(np.flatnonzero(pool[7])) == {16 + 10, 16 + 11, 16 + 14, 16 + 15}


def test_spatial_downsample_values():
    x = Tensor(np.arange(16, dtype=float).reshape(16, 1))
    pooled = spatial_downsample(x, frames=1, s=2).data[:, 0]
    np.testing.assert_allclose(pooled, [2.5, 4.5, 10.5, 12.5])
    assert spatial_downsample(x, frames=1, s=1) is x


def test_spatial_downsample_rejects_bad_grids():
    with pytest.raises(DimensionError):
        spatial_downsample(Tensor(np.zeros((16, 2))), frames=1, s=3)
    with pytest.raises(DimensionError):
        spatial_downsample(Tensor(np.zeros((12, 2))), frames=1, s=2)
    with pytest.raises(DimensionError):
        spatial_downsample(Tensor(np.zeros((15, 2))), frames=2, s=1)


def test_visual_and_probe_connectors_are_disjoint():
    visual, probe = build_connectors(ConnectorConfig(hidden=8), d_v=4, d_lm=6, rng=XorShiftRng(0))
    v_params = dict(visual.named_parameters())
    p_params = dict(probe.named_parameters())
    assert all(n.startswith("connector.") for n in v_params)
    assert all(n.startswith("probe_connector.") for n in p_params)
    assert not np.allclose(v_params["connector.w1"].data, p_params["probe_connector.w1"].data)
    out = visual(Tensor(np.ones((3, 4))))
    assert out.shape == (3, 6)
    with pytest.raises(DimensionError):
        probe(Tensor(np.ones((3, 5))))


def _connector(std=0.5):
    return MlpConnector("connector", 4, 8, 6, XorShiftRng(3), std=std)


def test_project_visual_gradients_match_finite_differences():
    connector = _connector()
    pooled = Tensor(XorShiftRng(4).normal((5, 4)), requires_grad=True)

    def loss_fn():
        out = project_visual(pooled, connector)
        return sum_all(mul(out, out))

    targets = [pooled] + [connector.params[f"connector.{n}"] for n in ("w1", "b1", "w2", "b2")]
    for target, grad in zip(targets, analytic_gradients(loss_fn, targets)):
        np.testing.assert_allclose(grad, numeric_gradient(loss_fn, target), rtol=1e-5, atol=1e-7)


def test_zero_weights_emit_bias_rows():
    connector = _connector()
    connector.params["connector.w2"].data[:] = 0.0
    bias = XorShiftRng(5).normal(6)
    connector.params["connector.b2"].data[:] = bias
    out = project_visual(Tensor(XorShiftRng(6).normal((3, 4))), connector)
    np.testing.assert_array_equal(out.data, np.tile(bias, (3, 1)))


def test_projection_commutes_with_token_permutation():
    connector = _connector()
    x = XorShiftRng(7).normal((5, 4))
    perm = [3, 0, 4, 1, 2]
    out = project_visual(Tensor(x), connector).data
    np.testing.assert_allclose(project_visual(Tensor(x[perm]), connector).data, out[perm], rtol=0, atol=1e-12)
