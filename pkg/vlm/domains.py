"""
合成域数据 - 网格世界场景、域变换（视角 / 模态 / 任务）和成对的问答基准

场景是 16×16 像素、4×4 网格（每格 4 像素）的彩色形状，外加一个在 T 帧内移动、
最终停在某个物体上的 2×2 "actor" 标记。
"""
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import SCENE_SIDE, DataConfig
from .decoder import Vocabulary
from .numerics import XorShiftRng

GRID = 4
CELL = SCENE_SIDE // GRID
DATASET_FORMAT = 1


class DatasetError(ValueError):
    """数据集参数或目录无效"""


class DomainTransform(str, Enum):
    """域变换"""
    IDENTITY = "identity"  # 源域
    VIEW = "view"          # 以 actor 为中心裁剪放大
    MODALITY = "modality"  # 亮度转伪深度，三通道相同
    TASK = "task"          # 桌面背景，答案为坐标


SHIFT_TRANSFORMS = {"view": DomainTransform.VIEW, "modality": DomainTransform.MODALITY,
                    "task": DomainTransform.TASK}

COLORS: Dict[str, Tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
COLOR_NAMES = tuple(COLORS)

_M = np.array
SHAPES: Dict[str, np.ndarray] = {
    "square": _M([[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]], dtype=bool),
    "circle": _M([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=bool),
    "triangle": _M([[0, 1, 1, 0], [0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1]], dtype=bool),
    "cross": _M([[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]], dtype=bool),
}
SHAPE_NAMES = tuple(SHAPES)

REGIONS = ("top-left", "top-right", "bottom-left", "bottom-right")
FAMILIES = ("color", "region", "object")
CONTROL = "control"

QUESTIONS: Dict[str, List[str]] = {
    "color": "what color is the moving object".split(),
    "region": "which region does the actor end in".split(),
    "object": "which object does the actor touch".split(),
    CONTROL: "where to pick and place".split(),
}

# 控制任务的难度层级：L2 的形状-颜色组合和 L3 的形状在训练中从不出现
HELD_OUT_PAIRS = (("circle", "red"), ("triangle", "green"), ("square", "blue"))
UNSEEN_SHAPE = "cross"
LEVEL_RULES = {1: "seen", 2: "novel-pair", 3: "novel-shape"}
TABLETOP_GRAY = 0.25
LUMA = np.array([0.299, 0.587, 0.114])


def coordinate_token(cell: Tuple[int, int]) -> str:
    return f"({cell[0]},{cell[1]})"


COORDINATES = tuple(coordinate_token((r, c)) for r in range(GRID) for c in range(GRID))


def build_vocabulary() -> Vocabulary:
    """合成数据的封闭词表"""
    words: List[str] = []
    for family in (*FAMILIES, CONTROL):
        for w in QUESTIONS[family]:
            if w not in words:
                words.append(w)
    words += list(COLOR_NAMES) + list(REGIONS) + list(SHAPE_NAMES) + list(COORDINATES)
    return Vocabulary(words)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: Tuple[int, int]


@dataclass(frozen=True)
class SceneSpec:
    """场景描述；第一个物体是 actor 最终接触的物体"""
    seed: int
    objects: Tuple[SceneObject, ...]
    actor_color: str
    actor_path: Tuple[Tuple[int, int], ...]

    @property
    def frames(self) -> int:
        return len(self.actor_path)

    @property
    def touched(self) -> SceneObject:
        return self.objects[0]


def _pairs(rule: str, touched: bool) -> List[Tuple[str, str]]:
    everything = [(s, c) for s in SHAPE_NAMES for c in COLOR_NAMES]
    seen = [p for p in everything if p not in HELD_OUT_PAIRS and p[0] != UNSEEN_SHAPE]
    if rule == "any":
        return everything
    if rule == "seen" or not touched:
        return seen
    if rule == "novel-pair":
        return list(HELD_OUT_PAIRS)
    if rule == "novel-shape":
        return [(UNSEEN_SHAPE, c) for c in COLOR_NAMES]
    raise DatasetError(f"未知的物体规则 {rule!r}")


def generate_scene(seed: int, frames: int = 4, min_objects: int = 2, max_objects: int = 5,
                   rule: str = "any") -> SceneSpec:
    """由种子确定地生成场景"""
    if frames < 1:
        raise DatasetError("frames 必须 ≥ 1")
    if not 2 <= min_objects <= max_objects <= GRID * GRID:
        raise DatasetError(f"物体数量范围无效 [{min_objects}, {max_objects}]")
    rng = XorShiftRng(seed)
    count = rng.integers(min_objects, max_objects + 1)
    cells = [(int(i) // GRID, int(i) % GRID) for i in rng.permutation(GRID * GRID)[:count]]
    objects = []
    for k, cell in enumerate(cells):
        shape, color = rng.choice(_pairs(rule, touched=k == 0))
        objects.append(SceneObject(shape=shape, color=color, cell=cell))

    end = cells[0]
    start_index = rng.integers(0, GRID * GRID - 1)
    end_index = end[0] * GRID + end[1]
    if start_index >= end_index:
        start_index += 1
    start = (start_index // GRID, start_index % GRID)
    path = []
    for t in range(frames):
        frac = t / (frames - 1) if frames > 1 else 1.0
        r = int(np.floor(start[0] + (end[0] - start[0]) * frac + 0.5))
        c = int(np.floor(start[1] + (end[1] - start[1]) * frac + 0.5))
        path.append((r, c))
    return SceneSpec(seed=seed, objects=tuple(objects), actor_color=rng.choice(COLOR_NAMES),
                     actor_path=tuple(path))


def _base_frames(scene: SceneSpec) -> np.ndarray:
    video = np.zeros((scene.frames, 3, SCENE_SIDE, SCENE_SIDE))
    for obj in scene.objects:
        r, c = obj.cell
        mask = SHAPES[obj.shape]
        for ch, value in enumerate(COLORS[obj.color]):
            block = video[:, ch, r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
            block[:, mask] = value
    actor = COLORS[scene.actor_color]
    for t, (r, c) in enumerate(scene.actor_path):
        for ch, value in enumerate(actor):
            video[t, ch, r * CELL + 1:r * CELL + 3, c * CELL + 1:c * CELL + 3] = value
    return video


def _view_shift(video: np.ndarray, scene: SceneSpec) -> np.ndarray:
    half = SCENE_SIDE // 4
    padded = np.pad(video, ((0, 0), (0, 0), (half, half), (half, half)))
    out = np.empty_like(video)
    for t, (r, c) in enumerate(scene.actor_path):
        # actor 中心在 (4r+2, 4c+2)，填充后窗口起点恰好是 4r+2
        top, left = r * CELL + CELL // 2, c * CELL + CELL // 2
        crop = padded[t, :, top:top + 2 * half, left:left + 2 * half]
        out[t] = crop.repeat(2, axis=1).repeat(2, axis=2)
    return out


def _modality_shift(video: np.ndarray) -> np.ndarray:
    luminance = np.tensordot(LUMA, video, axes=([0], [1]))  # T×H×W
    foreground = video.max(axis=1) > 0
    depth = np.where(foreground, 1.0 - luminance, 0.0)
    return np.repeat(depth[:, None], 3, axis=1)


def _task_shift(video: np.ndarray) -> np.ndarray:
    background = video.max(axis=1, keepdims=True) == 0
    return np.where(background, TABLETOP_GRAY, video)


def render(scene: SceneSpec, transform: Union[DomainTransform, str] = DomainTransform.IDENTITY) -> np.ndarray:
    """渲染为 T×3×16×16 视频，像素在 [0, 1]"""
    try:
        transform = DomainTransform(transform)
    except ValueError:
        raise DatasetError(f"未知的域变换 {transform!r}") from None
    video = _base_frames(scene)
    if transform == DomainTransform.VIEW:
        return _view_shift(video, scene)
    if transform == DomainTransform.MODALITY:
        return _modality_shift(video)
    if transform == DomainTransform.TASK:
        return _task_shift(video)
    return video


def region_of(cell: Tuple[int, int]) -> str:
    vertical = "top" if cell[0] < GRID // 2 else "bottom"
    horizontal = "left" if cell[1] < GRID // 2 else "right"
    return f"{vertical}-{horizontal}"


def answer_for(scene: SceneSpec, family: str) -> List[str]:
    if family == "color":
        return [scene.actor_color]
    if family == "region":
        return [region_of(scene.actor_path[-1])]
    if family == "object":
        return [scene.touched.shape]
    if family == CONTROL:
        return [coordinate_token(scene.actor_path[0]), coordinate_token(scene.actor_path[-1])]
    raise DatasetError(f"未知的问题类型 {family!r}")


@dataclass
class QASample:
    frames: np.ndarray
    question: List[str]
    answer: List[str]
    domain: str
    pair_id: str
    family: str
    split: str
    seed: int
    level: Optional[int] = None


@dataclass
class Benchmark:
    """一个域上某一问题类型的 train/eval 数据"""
    name: str
    transform: str
    family: str
    domain: str
    seed: int
    level: Optional[int] = None
    train: List[QASample] = field(default_factory=list)
    eval: List[QASample] = field(default_factory=list)

    @property
    def samples(self) -> List[QASample]:
        return self.train + self.eval


def benchmark_name(domain: str, family: str, level: Optional[int] = None) -> str:
    suffix = f"-L{level}" if level is not None else ""
    return f"{domain}/{family}{suffix}"


_SCENE_KEYS = (*FAMILIES, CONTROL)


def scene_seeds(n: int, seed: int, scene_key: str, level: Optional[int] = None) -> Tuple[List[int], List[int]]:
    """80/20 切分，训练和评测的场景种子互不相交"""
    n_train = int(n * 0.8)
    base = seed * 10_000_000 + _SCENE_KEYS.index(scene_key) * 1_000_000 + (level or 0) * 100_000
    train = [base + i for i in range(n_train)]
    evaluation = [base + 500_000 + i for i in range(n - n_train)]
    return train, evaluation


def make_benchmark(n: int, transform: Union[DomainTransform, str], family: str,
                   cfg: Optional[DataConfig] = None, seed: int = 0, level: Optional[int] = None,
                   scene_key: Optional[str] = None, domain: Optional[str] = None) -> Benchmark:
    """生成 n 个样本的问答基准（80 train / 20 eval）

    transform=task 时答案为 pick/place 两个坐标，family 必须是 control；
    level 决定评测场景中被接触物体的新颖程度。
    scene_key 相同、种子相同的两个基准共享场景，pair_id 一一对应。
    """
    cfg = cfg or DataConfig()
    if n < 20:
        raise DatasetError(f"样本数 n={n} 太小（至少 20）")
    try:
        transform = DomainTransform(transform)
    except ValueError:
        raise DatasetError(f"未知的域变换 {transform!r}") from None
    if transform == DomainTransform.TASK:
        if family != CONTROL:
            raise DatasetError("task 变换只支持 control 问题类型")
        level = level or 1
    elif family not in FAMILIES:
        raise DatasetError(f"未知的问题类型 {family!r}")
    if level is not None and level not in LEVEL_RULES:
        raise DatasetError(f"未知的难度层级 {level}")
    scene_key = scene_key or family
    if scene_key not in _SCENE_KEYS:
        raise DatasetError(f"未知的场景键 {scene_key!r}")
    domain = domain or ("source" if transform == DomainTransform.IDENTITY else "target")

    train_seeds, eval_seeds = scene_seeds(n, seed, scene_key, level)
    bench = Benchmark(name=benchmark_name(domain, family, level if transform == DomainTransform.TASK else None),
                      transform=transform.value, family=family, domain=domain, seed=seed, level=level)
    for split, seeds in (("train", train_seeds), ("eval", eval_seeds)):
        if level is None:
            rule = "any"
        else:
            rule = "seen" if split == "train" else LEVEL_RULES[level]
        for scene_seed in seeds:
            scene = generate_scene(scene_seed, cfg.frames, cfg.min_objects, cfg.max_objects, rule)
            sample = QASample(
                frames=render(scene, transform),
                question=list(QUESTIONS[family]),
                answer=answer_for(scene, family),
                domain=domain,
                pair_id=f"{scene_key}-{scene_seed}",
                family=family,
                split=split,
                seed=scene_seed,
                level=level,
            )
            getattr(bench, split).append(sample)
    return bench


def make_domain_pair(shift: str, family: str, cfg: Optional[DataConfig] = None, seed: int = 0,
                     level: Optional[int] = None) -> Tuple[Benchmark, Benchmark]:
    """同一批场景的源域 / 目标域基准"""
    cfg = cfg or DataConfig()
    if shift not in SHIFT_TRANSFORMS:
        raise DatasetError(f"未知的域位移 {shift!r}")
    n = cfg.samples_per_family
    if shift == "task":
        level = level or 1
        source = make_benchmark(n, DomainTransform.IDENTITY, family, cfg, seed, level=level, scene_key=family)
        target = make_benchmark(n, DomainTransform.TASK, CONTROL, cfg, seed, level=level, scene_key=family)
        return source, target
    source = make_benchmark(n, DomainTransform.IDENTITY, family, cfg, seed)
    target = make_benchmark(n, SHIFT_TRANSFORMS[shift], family, cfg, seed)
    return source, target


def answer_marginals(samples: Sequence[QASample]) -> Dict[str, float]:
    """答案分布（用于确认位移是视觉上的而不是标签上的）"""
    if not samples:
        return {}
    counts: Dict[str, int] = {}
    for s in samples:
        key = " ".join(s.answer)
        counts[key] = counts.get(key, 0) + 1
    return {k: counts[k] / len(samples) for k in sorted(counts)}


# ---------------------------------------------------------------------------
# 数据集目录：manifest.json + 每个样本一个 .npy
# ---------------------------------------------------------------------------

def save_dataset(bench: Benchmark, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    (directory / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(bench.samples):
        rel = f"samples/{i:05d}.npy"
        np.save(directory / rel, sample.frames.astype(np.float64))
        entries.append({
            "file": rel,
            "question": sample.question,
            "answer": sample.answer,
            "pair_id": sample.pair_id,
            "domain": sample.domain,
            "family": sample.family,
            "split": sample.split,
            "seed": sample.seed,
            "level": sample.level,
        })
    manifest = {
        "format_version": DATASET_FORMAT,
        "name": bench.name,
        "transform": bench.transform,
        "family": bench.family,
        "domain": bench.domain,
        "seed": bench.seed,
        "level": bench.level,
        "samples": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False), encoding="utf-8")
    return path


def load_dataset(directory: Union[str, Path]) -> Benchmark:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"{directory}: 缺少 manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: JSON 无效: {e}") from e
    if manifest.get("format_version") != DATASET_FORMAT:
        raise DatasetError(f"{manifest_path}: 不支持的格式版本 {manifest.get('format_version')}")
    bench = Benchmark(name=manifest["name"], transform=manifest["transform"], family=manifest["family"],
                      domain=manifest["domain"], seed=manifest["seed"], level=manifest["level"])
    for entry in manifest["samples"]:
        file = directory / entry["file"]
        if not file.is_file():
            raise DatasetError(f"{directory}: 缺少样本文件 {entry['file']}")
        sample = QASample(frames=np.load(file), question=entry["question"], answer=entry["answer"],
                          domain=entry["domain"], pair_id=entry["pair_id"], family=entry["family"],
                          split=entry["split"], seed=entry["seed"], level=entry["level"])
        getattr(bench, sample.split).append(sample)
    return bench


# ---------------------------------------------------------------------------
# 一次实验用到的全部基准
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkSuite:
    """某种域位移下的源域 / 目标域基准

    source_train 用于预训练基座，target_train 用于适应训练；
    target / source 是参与 Δ 计算的评测基准（名字 → 基准）。
    """
    shift: str
    seed: int
    source: Dict[str, Benchmark]
    target: Dict[str, Benchmark]

    @property
    def source_train(self) -> List[QASample]:
        return [s for b in self.source.values() for s in b.train]

    @property
    def target_train(self) -> List[QASample]:
        if self.shift == "task":
            # 只在最低层级（通常是 L1，已见物体）上训练
            lowest = min(b.level for b in self.target.values())
            return [s for b in self.target.values() if b.level == lowest for s in b.train]
        return [s for b in self.target.values() for s in b.train]

    def eval_sets(self) -> Dict[str, List[QASample]]:
        return {name: b.eval for name, b in {**self.target, **self.source}.items()}


def benchmark_suite(shift: str, cfg: Optional[DataConfig] = None, seed: int = 0) -> BenchmarkSuite:
    """view/modality：每个问题类型一对源/目标基准；task：源域各问题类型 + control L1–L3"""
    cfg = cfg or DataConfig()
    if shift not in SHIFT_TRANSFORMS:
        raise DatasetError(f"未知的域位移 {shift!r}")
    n = cfg.samples_per_family
    source: Dict[str, Benchmark] = {}
    target: Dict[str, Benchmark] = {}
    for family in cfg.families:
        src = make_benchmark(n, DomainTransform.IDENTITY, family, cfg, seed)
        source[src.name] = src
        if shift != "task":
            tgt = make_benchmark(n, SHIFT_TRANSFORMS[shift], family, cfg, seed)
            target[tgt.name] = tgt
    if shift == "task":
        for level in sorted(cfg.task_levels):
            tgt = make_benchmark(n, DomainTransform.TASK, CONTROL, cfg, seed, level=level, scene_key=CONTROL)
            target[tgt.name] = tgt
    return BenchmarkSuite(shift=shift, seed=seed, source=source, target=target)
