"""
指标与分析工具测试
"""
import numpy as np
import pytest

from vlm.analysis import (
    PUBLISHED_TABLES, GaussianSummary, MetricError, aligned_pairs, attention_rollout, bhattacharyya_distance,
    delta_metrics, domain_classifier_accuracy, export_embeddings_csv, language_visual_attention,
    load_embeddings_csv, paired_embedding_stats, published_report,
)
from vlm.numerics import XorShiftRng

SQUARE = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
IDS = ["a", "b", "c", "d"]


def test_bd_and_psd_for_shifted_cloud():
    bd, psd = paired_embedding_stats(SQUARE, SQUARE + [2.0, 0.0], IDS, IDS)
    # 协方差都是 I，BD 只剩均值项 ⅛·|Δμ|²
    assert bd == pytest.approx(0.5)
    assert psd == pytest.approx(2.0)


def test_bd_is_symmetric_and_zero_on_identical_clouds():
    rng = XorShiftRng(0)
    a, b = rng.normal((30, 3)), rng.normal((30, 3)) * 2 + 1
    ga, gb = GaussianSummary.fit(a), GaussianSummary.fit(b)
    assert bhattacharyya_distance(ga, gb) == pytest.approx(bhattacharyya_distance(gb, ga))
    assert bhattacharyya_distance(ga, ga) == pytest.approx(0.0, abs=1e-12)
    assert bhattacharyya_distance(ga, gb) > 0


def test_covariance_regularised_only_when_singular():
    full = GaussianSummary.fit(SQUARE)
    np.testing.assert_allclose(full.cov, np.eye(2))
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    singular = GaussianSummary.fit(line)
    assert np.linalg.matrix_rank(singular.cov) == 2
    with pytest.raises(MetricError):
        GaussianSummary.fit(np.ones((1, 2)))


def test_paired_stats_input_checks():
    with pytest.raises(MetricError):
        paired_embedding_stats(SQUARE, SQUARE[:3], IDS, IDS[:3])
    with pytest.raises(MetricError):
        paired_embedding_stats(SQUARE[:2], SQUARE[:2], IDS[:2], IDS[:2])
    with pytest.raises(MetricError):
        paired_embedding_stats(SQUARE, SQUARE, IDS, ["a", "b", "d", "c"])


def test_rollout_of_uniform_layers():
    n = 4
    uniform = np.full((n, n), 1.0 / n)
    rollout = attention_rollout([uniform, uniform])
    np.testing.assert_allclose(rollout, 0.25 * (3 * uniform + np.eye(n)))
    np.testing.assert_allclose(attention_rollout([np.eye(3)] * 3), np.eye(3))
    # 多头输入先对头平均
    heads = np.stack([np.eye(n), uniform])
    np.testing.assert_allclose(attention_rollout([heads]), attention_rollout([(np.eye(n) + uniform) / 2]))


def test_rollout_rejects_bad_input():
    with pytest.raises(MetricError):
        attention_rollout([])
    with pytest.raises(MetricError):
        attention_rollout([np.ones((2, 3))])
    with pytest.raises(MetricError):
        attention_rollout([np.eye(2), np.eye(3)])


def test_delta_metrics_on_published_rows():
    viscop = published_report("egocentric", "viscop")
    assert viscop.delta_target == pytest.approx(3.53, abs=0.01)
    assert viscop.delta_source == pytest.approx(1.77, abs=0.01)
    assert viscop.acc_target_expert == pytest.approx(73.96, abs=0.01)
    vlc = published_report("egocentric", "vlc-only")
    assert vlc.delta_target == pytest.approx(-0.73, abs=0.01)
    assert vlc.delta_source == pytest.approx(0.31, abs=0.01)
    depth = published_report("depth", "viscop")
    assert depth.delta_target == pytest.approx(19.27, abs=0.01)
    assert depth.delta_source == pytest.approx(1.84, abs=0.01)
    robot = published_report("robot", "viscop-llm-full")
    assert robot.delta_target == pytest.approx(67.82, abs=0.01)
    assert robot.delta_source == pytest.approx(-4.58, abs=0.01)
    assert set(PUBLISHED_TABLES) == {"egocentric", "depth", "robot"}


@pytest.mark.parametrize("table", sorted(PUBLISHED_TABLES))
def test_recomputed_averages_match_printed_values(table):
    printed = PUBLISHED_TABLES[table]["printed"]
    assert set(printed) == set(PUBLISHED_TABLES[table]["rows"])
    for row, (target_avg, source_avg, d_target, d_source) in printed.items():
        report = published_report(table, row)
        assert report.acc_target_expert == pytest.approx(target_avg, abs=0.01), row
        assert report.acc_source_expert == pytest.approx(source_avg, abs=0.01), row
        # 印刷的 Δ 由四舍五入后的平均值相减得到
        if d_target is not None:
            assert report.delta_target == pytest.approx(d_target, abs=0.02), row
        if d_source is not None:
            assert report.delta_source == pytest.approx(d_source, abs=0.02), row


def test_delta_metrics_errors():
    base = {"t": 50.0, "s": 80.0}
    with pytest.raises(MetricError):
        delta_metrics(base, {"t": 60.0}, ["t"], ["s"])
    with pytest.raises(MetricError):
        delta_metrics(base, base, [], ["s"])
    with pytest.raises(MetricError):
        delta_metrics(base, base, ["t"], ["x"])
    report = delta_metrics(base, {"t": 60.0, "s": 78.0}, ["t"], ["s"], strategy="viscop")
    assert report.delta_target == pytest.approx(10.0)
    assert report.delta_source == pytest.approx(-2.0)
    assert [r.split for r in report.rows()] == ["target", "source"]


def test_embedding_csv_round_trip_and_alignment(tmp_path):
    path = export_embeddings_csv(tmp_path / "emb.csv", ["p1", "p2", "p2", "p1"],
                                 ["source", "source", "target", "target"],
                                 np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6], [0.7, 0.8]]))
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "pair_id,domain,dim_0,dim_1"
    groups = load_embeddings_csv(path)
    src, tgt, ids = aligned_pairs(groups)
    assert ids == ["p1", "p2"]
    np.testing.assert_array_equal(src, [[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_array_equal(tgt, [[0.7, 0.8], [0.5, 0.6]])
    with pytest.raises(MetricError):
        aligned_pairs(groups, target="depth")


def test_projected_csv_with_bad_header(tmp_path):
    path = tmp_path / "proj.csv"
    path.write_text("id,x,y\n1,0,0\n", encoding="utf-8")
    with pytest.raises(MetricError):
        load_embeddings_csv(path)


def test_domain_classifier_separates_distinct_pixels():
    rng = XorShiftRng(1)
    source = [rng.uniform((2, 3, 4, 4)) * 0.2 for _ in range(12)]
    target = [0.8 + rng.uniform((2, 3, 4, 4)) * 0.2 for _ in range(12)]
    assert domain_classifier_accuracy(source, target, steps=50) >= 0.9
    with pytest.raises(MetricError):
        domain_classifier_accuracy(source[:1], target)


def test_language_visual_attention_is_bounded(probed_model, frames):
    rows = language_visual_attention(probed_model, frames, "what color is the moving object".split())
    assert len(rows) <= probed_model.cfg.decoder.max_answer_len
    for row in rows:
        assert 0.0 <= row["visual"] <= 1.0
        assert 0.0 <= row["probes"] <= 1.0
        assert row["visual"] + row["probes"] <= 1.0 + 1e-9
