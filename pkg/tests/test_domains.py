"""
合成域数据测试
"""
import numpy as np
import pytest

from config import DataConfig
from vlm.analysis import domain_classifier_accuracy
from vlm.domains import (
    COLORS, CONTROL, HELD_OUT_PAIRS, QUESTIONS, TABLETOP_GRAY, UNSEEN_SHAPE, DatasetError, answer_for,
    answer_marginals, benchmark_suite, build_vocabulary, generate_scene, load_dataset, make_benchmark,
    make_domain_pair, region_of, render, save_dataset, scene_seeds,
)

SMALL = DataConfig(frames=2, samples_per_family=20, families=["color", "object"], task_levels=[1, 2, 3])


def test_scene_generation_is_deterministic():
    assert generate_scene(11) == generate_scene(11)
    assert generate_scene(11) != generate_scene(12)
    scene = generate_scene(11, frames=4)
    assert scene.frames == 4
    assert scene.actor_path[-1] == scene.touched.cell
    assert scene.actor_path[0] != scene.actor_path[-1]
    cells = [o.cell for o in scene.objects]
    assert len(set(cells)) == len(cells)


def test_scene_parameter_validation():
    with pytest.raises(DatasetError):
        generate_scene(0, frames=0)
    with pytest.raises(DatasetError):
        generate_scene(0, min_objects=1)
    with pytest.raises(DatasetError):
        generate_scene(0, rule="novel-everything")


def test_render_shapes_and_range():
    scene = generate_scene(3, frames=3)
    for transform in ("identity", "view", "modality", "task"):
        video = render(scene, transform)
        assert video.shape == (3, 3, 16, 16)
        assert video.min() >= 0.0 and video.max() <= 1.0
    with pytest.raises(DatasetError):
        render(scene, "infrared")


def test_view_shift_centres_the_actor():
    scene = generate_scene(5, frames=3)
    video = render(scene, "view")
    actor = np.array(COLORS[scene.actor_color])
    for t in range(3):
        centre = video[t, :, 6:10, 6:10]
        np.testing.assert_allclose(centre, np.broadcast_to(actor[:, None, None], centre.shape))


def test_modality_shift_is_single_channel_depth():
    scene = generate_scene(6)
    video = render(scene, "modality")
    np.testing.assert_array_equal(video[:, 0], video[:, 1])
    np.testing.assert_array_equal(video[:, 1], video[:, 2])
    base = render(scene)
    background = base.max(axis=1) == 0
    assert (video[:, 0][background] == 0).all()


def test_task_shift_paints_the_tabletop():
    scene = generate_scene(7)
    base, task = render(scene), render(scene, "task")
    background = base.max(axis=1) == 0
    assert (task[:, 0][background] == TABLETOP_GRAY).all()
    foreground = ~background
    np.testing.assert_array_equal(task.transpose(1, 0, 2, 3)[:, foreground], base.transpose(1, 0, 2, 3)[:, foreground])


def test_answers_per_family():
    scene = generate_scene(8)
    assert answer_for(scene, "color") == [scene.actor_color]
    assert answer_for(scene, "region") == [region_of(scene.actor_path[-1])]
    assert answer_for(scene, "object") == [scene.touched.shape]
    pick, place = answer_for(scene, CONTROL)
    r, c = scene.actor_path[0]
    assert pick == f"({r},{c})"
    assert region_of((0, 3)) == "top-right"
    assert region_of((2, 1)) == "bottom-left"
    with pytest.raises(DatasetError):
        answer_for(scene, "count")


def test_vocabulary_covers_every_question_and_answer():
    vocab = build_vocabulary()
    for family, question in QUESTIONS.items():
        vocab.encode(question)
        for seed in range(20):
            vocab.encode(answer_for(generate_scene(seed), family))


def test_benchmark_split_and_size_guard():
    bench = make_benchmark(20, "identity", "color", SMALL, seed=0)
    assert len(bench.train) == 16 and len(bench.eval) == 4
    assert not {s.seed for s in bench.train} & {s.seed for s in bench.eval}
    assert bench.name == "source/color"
    with pytest.raises(DatasetError):
        make_benchmark(19, "identity", "color", SMALL)
    with pytest.raises(DatasetError):
        make_benchmark(20, "task", "color", SMALL)


def test_domain_pair_shares_scenes():
    source, target = make_domain_pair("modality", "object", SMALL, seed=1)
    assert [s.pair_id for s in source.samples] == [s.pair_id for s in target.samples]
    assert [s.answer for s in source.samples] == [s.answer for s in target.samples]
    assert not np.allclose(source.samples[0].frames, target.samples[0].frames)
    assert answer_marginals(source.samples) == answer_marginals(target.samples)
    assert sum(answer_marginals(source.samples).values()) == pytest.approx(1.0)


def test_task_levels_control_novelty():
    l1 = make_benchmark(20, "task", CONTROL, SMALL, level=1, scene_key=CONTROL)
    l2 = make_benchmark(20, "task", CONTROL, SMALL, level=2, scene_key=CONTROL)
    l3 = make_benchmark(20, "task", CONTROL, SMALL, level=3, scene_key=CONTROL)
    assert l2.name == "target/control-L2"

    def touched(sample):
        scene = generate_scene(sample.seed, SMALL.frames, SMALL.min_objects, SMALL.max_objects,
                              {1: "seen", 2: "novel-pair", 3: "novel-shape"}[sample.level]
                              if sample.split == "eval" else "seen")
        return scene.touched.shape, scene.touched.color

    for bench in (l1, l2, l3):
        for s in bench.train:
            pair = touched(s)
            assert pair not in HELD_OUT_PAIRS and pair[0] != UNSEEN_SHAPE
    assert all(touched(s) in HELD_OUT_PAIRS for s in l2.eval)
    assert all(touched(s)[0] == UNSEEN_SHAPE for s in l3.eval)
    assert all(len(s.answer) == 2 for s in l1.samples)


def test_suite_for_view_shift():
    suite = benchmark_suite("view", SMALL)
    assert sorted(suite.source) == ["source/color", "source/object"]
    assert sorted(suite.target) == ["target/color", "target/object"]
    assert len(suite.source_train) == 32
    assert len(suite.target_train) == 32
    assert set(suite.eval_sets()) == set(suite.source) | set(suite.target)


def test_suite_for_task_shift_trains_on_lowest_level():
    suite = benchmark_suite("task", SMALL)
    assert sorted(suite.target) == ["target/control-L1", "target/control-L2", "target/control-L3"]
    assert {s.level for s in suite.target_train} == {1}
    assert len(suite.target_train) == 16
    with pytest.raises(DatasetError):
        benchmark_suite("weather", SMALL)


def test_dataset_directory_round_trip(tmp_path):
    bench = make_benchmark(20, "view", "object", SMALL, seed=2)
    save_dataset(bench, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded.name == bench.name
    assert [s.pair_id for s in loaded.eval] == [s.pair_id for s in bench.eval]
    np.testing.assert_array_equal(loaded.train[3].frames, bench.train[3].frames)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nowhere")


def test_task_shift_is_linearly_separable():
    source, target = make_domain_pair("task", "color", SMALL)
    accuracy = domain_classifier_accuracy([s.frames for s in source.samples], [t.frames for t in target.samples])
    assert accuracy > 0.9


@pytest.mark.parametrize("shift", ["view", "modality"])
def test_answer_marginals_match_across_domains(shift):
    source, target = make_domain_pair(shift, "color", SMALL, seed=3)
    src, tgt = answer_marginals(source.samples), answer_marginals(target.samples)
    assert set(src) == set(tgt)
    for answer in src:
        assert abs(src[answer] - tgt[answer]) <= 0.05


def test_default_split_sizes_per_domain():
    data = DataConfig()
    splits = [scene_seeds(data.samples_per_family, data.seed, family) for family in data.families]
    assert sum(len(train) for train, _ in splits) == 480
    assert sum(len(evaluation) for _, evaluation in splits) == 120
