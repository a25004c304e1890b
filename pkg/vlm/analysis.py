"""
指标与分析工具 - Δ 指标、注意力 rollout、探针注意力图、成对嵌入统计
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models import AdaptationReport
from .encoder import frame_attention
from .numerics import (
    GradTape, NumericError, Tensor, XorShiftRng, add, cross_entropy, matmul, zeros,
)

if TYPE_CHECKING:
    from .model import VlmModel

logger = logging.getLogger("viscop.analysis")


class MetricError(ValueError):
    """指标输入不一致（键不匹配、空评测集、非方阵等）"""


# ---------------------------------------------------------------------------
# 主结果表中印刷的逐基准数字（百分点），用于校验 Δ 与平均值的算术
# ---------------------------------------------------------------------------

PUBLISHED_TABLES: Dict[str, Dict] = {
    "egocentric": {
        "target": ["action-und", "task-regions", "hoi", "hand-ident", "egoschema"],
        "source": ["nextqa", "videomme", "adlx-mcq", "adlx-desc"],
        "rows": {
            "base": [75.37, 74.88, 75.56, 65.38, 60.98, 84.32, 65.37, 77.36, 70.65],
            "vlc-only": [73.00, 76.71, 72.85, 65.51, 60.43, 84.21, 62.67, 76.56, 75.51],
            "vlc-ve": [76.13, 82.93, 73.32, 64.86, 61.14, 83.87, 61.41, 77.05, 76.09],
            "vlc-ve-llm": [73.28, 82.68, 72.96, 65.77, 60.31, 82.34, 64.26, 78.21, 70.89],
            "vlc-llm-lora": [73.49, 74.27, 74.50, 64.99, 61.52, 84.24, 64.41, 77.42, 74.36],
            "viscop": [81.28, 82.80, 78.75, 64.86, 62.11, 84.31, 64.70, 78.97, 76.78],
        },
        # (target 平均, source 平均, Δ_target, Δ_source)
        "printed": {
            "base": (70.43, 74.42, None, None),
            "vlc-only": (69.70, 74.74, -0.74, 0.31),
            "vlc-ve": (71.68, 74.61, 1.24, 0.18),
            "vlc-ve-llm": (71.00, 73.93, 0.57, -0.50),
            "vlc-llm-lora": (69.75, 75.11, -0.68, 0.68),
            "viscop": (73.96, 76.19, 3.53, 1.77),
        },
    },
    "depth": {
        "target": ["action-und", "task-regions", "hoi", "hand-ident"],
        "source": ["ego-in-exo-rgb", "nextqa", "videomme", "adlx-mcq", "adlx-desc"],
        "rows": {
            "base": [34.73, 50.61, 35.06, 63.06, 66.27, 84.32, 65.37, 77.36, 70.65],
            "vlc-only": [55.67, 66.59, 62.46, 64.49, 71.36, 83.15, 62.41, 70.90, 69.05],
            "vlc-ve": [57.20, 69.63, 54.43, 64.48, 60.97, 82.89, 62.00, 71.48, 67.26],
            "vlc-llm-lora": [42.94, 53.54, 43.92, 63.96, 60.97, 83.73, 64.19, 72.19, 72.49],
            "viscop": [56.78, 73.17, 66.23, 64.35, 71.89, 83.91, 64.30, 76.59, 76.47],
        },
        "printed": {
            "base": (45.86, 72.79, None, None),
            "vlc-only": (62.30, 71.37, 16.44, -1.42),
            "vlc-ve": (61.44, 68.92, 15.57, -3.87),
            "vlc-llm-lora": (51.09, 70.71, 5.23, -2.08),
            "viscop": (65.13, 74.63, 19.27, 1.84),
        },
    },
    "robot": {
        "target": ["vima-l1", "vima-l2", "vima-l3"],
        "source": ["ego-in-exo-rgb", "nextqa", "videomme", "adlx-mcq", "adlx-desc"],
        "rows": {
            "base": [0.0, 0.0, 0.0, 66.27, 84.32, 65.37, 77.36, 70.65],
            "vlc-ve-llm": [69.62, 60.77, 65.00, 56.92, 83.24, 62.74, 52.21, 64.50],
            "vlc-llm-full": [63.46, 63.08, 68.75, 59.42, 83.16, 64.41, 52.92, 64.86],
            "viscop-llm-full": [67.69, 65.77, 70.00, 71.19, 83.71, 63.67, 55.89, 66.62],
        },
        "printed": {
            "base": (0.0, 72.79, None, None),
            "vlc-ve-llm": (65.13, 63.92, 65.13, -8.87),
            "vlc-llm-full": (65.10, 64.95, 65.10, -7.84),
            "viscop-llm-full": (67.82, 68.22, 67.82, -4.58),
        },
    },
}


def published_accuracies(table: str, row: str) -> Dict[str, float]:
    """把表中一行展开为 {基准: 准确率}"""
    table_def = PUBLISHED_TABLES[table]
    names = table_def["target"] + table_def["source"]
    return dict(zip(names, table_def["rows"][row]))


def published_report(table: str, row: str) -> AdaptationReport:
    """用印刷数字重算某一行相对基座的报告"""
    table_def = PUBLISHED_TABLES[table]
    return delta_metrics(published_accuracies(table, "base"), published_accuracies(table, row),
                         table_def["target"], table_def["source"], strategy=row, shift=table)


# ---------------------------------------------------------------------------
# Δ 指标
# ---------------------------------------------------------------------------

def _average(accs: Dict[str, float], names: Sequence[str]) -> float:
    return float(np.mean([accs[n] for n in names]))


def delta_metrics(base: Dict[str, float], expert: Dict[str, float], target: Sequence[str],
                  source: Sequence[str], strategy: str = "", shift: str = "", seed: int = 0,
                  config_hash: str = "", **extra) -> AdaptationReport:
    """按基准准确率（百分点）计算 Δ_target、Δ_source"""
    if set(base) != set(expert):
        missing = sorted(set(base) ^ set(expert))
        raise MetricError(f"基座与专家的基准集合不一致: {missing}")
    if not target or not source:
        raise MetricError("target 与 source 基准集合都不能为空")
    unknown = [n for n in (*target, *source) if n not in base]
    if unknown:
        raise MetricError(f"未知基准: {unknown}")
    t_base, t_expert = _average(base, target), _average(expert, target)
    s_base, s_expert = _average(base, source), _average(expert, source)
    return AdaptationReport(
        strategy=strategy, shift=shift, seed=seed, config_hash=config_hash,
        base=dict(sorted(base.items())), expert=dict(sorted(expert.items())),
        target_benchmarks=list(target), source_benchmarks=list(source),
        acc_target_base=t_base, acc_target_expert=t_expert,
        acc_source_base=s_base, acc_source_expert=s_expert,
        delta_target=t_expert - t_base, delta_source=s_expert - s_base,
        **extra,
    )


# ---------------------------------------------------------------------------
# 注意力
# ---------------------------------------------------------------------------

def attention_rollout(layers: Sequence[np.ndarray]) -> np.ndarray:
    """rollout = ∏_ℓ normalize(A_ℓ + I)，多头输入先对头平均"""
    if not layers:
        raise MetricError("attention_rollout: 没有输入层")
    fused = []
    for a in layers:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 3:
            a = a.mean(axis=0)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise MetricError(f"attention_rollout: 需要方阵, 实际形状 {a.shape}")
        fused.append(a)
    n = fused[0].shape[0]
    if any(a.shape != (n, n) for a in fused):
        raise MetricError("attention_rollout: 各层形状不一致")
    rollout = np.eye(n)
    for a in fused:
        a = a + np.eye(n)
        a = a / a.sum(axis=1, keepdims=True)
        rollout = a @ rollout
    return rollout


def encoder_rollout(model: "VlmModel", frames: np.ndarray, frame: int = 0) -> np.ndarray:
    """某一帧上编码器自注意力的 rollout (N×N)"""
    weights: List[np.ndarray] = []
    model.encode(frames, record=weights)
    n = model.encoder.cfg.n_patches
    return attention_rollout([frame_attention(w, frame, n) for w in weights])


def probe_attention_map(model: "VlmModel", frames: np.ndarray) -> Dict[int, np.ndarray]:
    """各交互层上探针注意力（对探针和头平均），形状 T×√N×√N，每层总和为 1"""
    if not model.has_probes or model.num_probes == 0:
        raise MetricError("probe_attention_map: 模型没有视觉探针")
    acts = model.encode(frames)
    record: Dict[int, np.ndarray] = {}
    model.probing(acts, record)
    side = model.encoder.cfg.grid_side
    maps = {}
    for ell, weights in sorted(record.items()):
        row = weights.mean(axis=(0, 1))
        maps[ell] = row.reshape(acts.frames, side, side)
    return maps


def language_visual_attention(model: "VlmModel", frames: np.ndarray, question: List[str]) -> List[Dict]:
    """每个生成答案 token 对视觉嵌入 E 与探针嵌入 Z 的注意力总量（对头和层平均）"""
    from .decoder import decode_forward

    answer = model.generate(frames, question)
    acts = model.encode(frames)
    visual, probes = model.prefix(acts)
    layout = model.layout(visual, probes, question)
    layout.answer = model.vocab.encode(answer)
    record: List[np.ndarray] = []
    decode_forward(model.decoder, layout, record)
    mean = np.mean([w.mean(axis=0) for w in record], axis=0)
    spans = layout.segment_slices()
    first = spans["A"].start
    out = []
    for j, token in enumerate(answer):
        row = mean[first + j - 1]
        out.append({
            "token": token,
            "visual": float(row[spans["E"]].sum()),
            "probes": float(row[spans["Z"]].sum()),
        })
    return out


# ---------------------------------------------------------------------------
# 成对嵌入统计
# ---------------------------------------------------------------------------

@dataclass
class GaussianSummary:
    """嵌入云的均值与协方差"""
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, points: np.ndarray, eps_scale: float = 1e-6) -> "GaussianSummary":
        """总体协方差；奇异时加 εI，ε = eps_scale·trace(Σ)/d"""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] < 2:
            raise MetricError(f"GaussianSummary.fit: 需要 n×d 且 n ≥ 2, 实际形状 {points.shape}")
        mean = points.mean(axis=0)
        centered = points - mean
        cov = centered.T @ centered / points.shape[0]
        cov = (cov + cov.T) / 2
        d = cov.shape[0]
        if np.linalg.matrix_rank(cov) < d:
            cov = cov + eps_scale * np.trace(cov) / d * np.eye(d)
        return cls(mean=mean, cov=cov)


def _logdet(m: np.ndarray, what: str) -> float:
    sign, value = np.linalg.slogdet(m)
    if sign <= 0:
        raise NumericError(f"{what} 不是正定矩阵")
    return float(value)


def bhattacharyya_distance(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """BD = ⅛ Δμᵀ Σ̄⁻¹ Δμ + ½ ln(det Σ̄ / √(det Σ₁ det Σ₂))，Σ̄ = (Σ₁+Σ₂)/2"""
    if g1.mean.shape != g2.mean.shape:
        raise MetricError(f"维度不一致: {g1.mean.shape} vs {g2.mean.shape}")
    avg = (g1.cov + g2.cov) / 2
    diff = g1.mean - g2.mean
    try:
        solved = np.linalg.solve(avg, diff)
    except np.linalg.LinAlgError as e:
        raise NumericError("平均协方差奇异") from e
    ld = _logdet(avg, "Σ̄")
    ld1, ld2 = _logdet(g1.cov, "Σ₁"), _logdet(g2.cov, "Σ₂")
    value = diff @ solved / 8 + (ld - (ld1 + ld2) / 2) / 2
    return max(float(value), 0.0)


def paired_embedding_stats(source: np.ndarray, target: np.ndarray, source_ids: Sequence[str],
                           target_ids: Sequence[str], eps_scale: float = 1e-6) -> Tuple[float, float]:
    """返回 (BD, PSD)；PSD 为成对嵌入欧氏距离的平均"""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise MetricError(f"嵌入形状不一致: {source.shape} vs {target.shape}")
    if source.shape[0] < 3:
        raise MetricError(f"至少需要 3 对样本, 实际 {source.shape[0]}")
    if list(source_ids) != list(target_ids):
        raise MetricError("source 与 target 的 pair_id 没有对齐")
    bd = bhattacharyya_distance(GaussianSummary.fit(source, eps_scale), GaussianSummary.fit(target, eps_scale))
    psd = float(np.linalg.norm(source - target, axis=1).mean())
    return bd, psd


def embedding_source(model: "VlmModel") -> str:
    """带探针的模型用池化探针，其余用池化视觉特征"""
    return "probes" if model.has_probes else "visual"


def pooled_embedding(model: "VlmModel", frames: np.ndarray) -> np.ndarray:
    acts = model.encode(frames)
    if model.has_probes:
        tokens = model.probing(acts)
    else:
        tokens = acts.last
    return tokens.data.mean(axis=0)


def collect_embeddings(model: "VlmModel", samples: Sequence) -> Tuple[List[str], np.ndarray]:
    ids = [s.pair_id for s in samples]
    return ids, np.stack([pooled_embedding(model, s.frames) for s in samples])


def export_embeddings_csv(path: Union[str, Path], pair_ids: Sequence[str], domains: Sequence[str],
                          embeddings: np.ndarray) -> Path:
    """列：pair_id, domain, dim_0..dim_{d-1}"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    embeddings = np.asarray(embeddings)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["pair_id", "domain"] + [f"dim_{i}" for i in range(embeddings.shape[1])])
        for pid, dom, row in zip(pair_ids, domains, embeddings):
            writer.writerow([pid, dom] + [repr(float(v)) for v in row])
    return path


def load_embeddings_csv(path: Union[str, Path]) -> Dict[str, Tuple[List[str], np.ndarray]]:
    """读取嵌入或外部投影坐标（pair_id, domain, x, y），按 domain 分组"""
    path = Path(path)
    groups: Dict[str, Tuple[List[str], List[List[float]]]] = {}
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:2] != ["pair_id", "domain"] or len(header) < 3:
            raise MetricError(f"{path}: 表头必须以 pair_id, domain 开头")
        for line in reader:
            if len(line) != len(header):
                raise MetricError(f"{path}: 第 {reader.line_num} 行列数不对")
            ids, rows = groups.setdefault(line[1], ([], []))
            ids.append(line[0])
            rows.append([float(v) for v in line[2:]])
    return {dom: (ids, np.array(rows)) for dom, (ids, rows) in groups.items()}


def aligned_pairs(groups: Dict[str, Tuple[List[str], np.ndarray]],
                  source: str = "source", target: str = "target") -> Tuple[np.ndarray, np.ndarray, List[str]]:
    """按 pair_id 对齐两个域的行"""
    if source not in groups or target not in groups:
        raise MetricError(f"缺少域: 需要 {source} 与 {target}, 实际 {sorted(groups)}")
    s_ids, s_rows = groups[source]
    t_ids, t_rows = groups[target]
    t_index = {pid: i for i, pid in enumerate(t_ids)}
    common = [pid for pid in s_ids if pid in t_index]
    s_index = {pid: i for i, pid in enumerate(s_ids)}
    return (s_rows[[s_index[p] for p in common]], t_rows[[t_index[p] for p in common]], common)


# ---------------------------------------------------------------------------
# 域可分性
# ---------------------------------------------------------------------------

def domain_classifier_accuracy(source: Sequence[np.ndarray], target: Sequence[np.ndarray], seed: int = 0,
                          steps: int = 200, lr: float = 0.5) -> float:
    """原始像素上的线性逻辑回归分类器区分源/目标域，返回留出一半数据上的准确率"""
    x = np.stack([np.asarray(f, dtype=np.float64).reshape(-1) for f in (*source, *target)])
    y = np.array([0] * len(source) + [1] * len(target))
    if len(source) < 2 or len(target) < 2:
        raise MetricError("每个域至少需要 2 个样本")
    order = XorShiftRng(seed).permutation(len(y))
    half = len(y) // 2
    train_idx, test_idx = order[:half], order[half:]
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0) + 1e-8
    x = (x - mu) / sd

    w = zeros((x.shape[1], 2), "domain_clf.w")
    b = zeros((2,), "domain_clf.b")
    x_train = Tensor(x[train_idx])
    for _ in range(steps):
        with GradTape() as tape:
            loss = cross_entropy(add(matmul(x_train, w), b), y[train_idx])
            tape.backward(loss)
            tape.clear()
        w.data = w.data - lr * w.grad
        b.data = b.data - lr * b.grad
        w.zero_grad()
        b.zero_grad()
    logits = x[test_idx] @ w.data + b.data
    accuracy = float((logits.argmax(axis=1) == y[test_idx]).mean())
    logger.info("domain classifier accuracy %.3f on %d held-out samples", accuracy, len(test_idx))
    return accuracy
