"""评估统计

top-k 准确率、非参数 bootstrap 百分位置信区间、配对/非配对置换检验、
探索视野的倍率分档汇总，以及按任意记录属性（置信度、罕见度等）分层的准确率。

所有蒙特卡洛运算由 numpy Generator 驱动，固定 seed 得到完全相同的输出；
置换检验 p 值使用加一平滑 (k + 1) / (N + 1)，保证 p ∈ (0, 1]。
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from slideseek.core.exceptions import StatsError, TraceError, ValidationError
from slideseek.core.models import Confidence, EventKind, OutcomeRecord, StatResult, TraceEvent
from slideseek.utils.fileio import read_jsonl

logger = logging.getLogger(__name__)

Matcher = Callable[[str, str], bool]

_EPS = 1e-12
MAG_CLASSES = ("high", "medium", "low")


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def exact_match(gold: str, prediction: str) -> bool:
    """忽略大小写与空白差异的精确匹配"""
    return normalize(gold) == normalize(prediction)


# =========================================================================
# 准确率与置信区间
# =========================================================================


def _as_array(scores: Sequence[float]) -> NDArray[np.float64]:
    return np.asarray(list(scores), dtype=np.float64)


def bootstrap_ci(scores: Sequence[float], replicates: int = 1000, seed: int = 0) -> StatResult:
    """均值的百分位 bootstrap 95% 置信区间"""
    arr = _as_array(scores)
    if arr.size == 0:
        raise StatsError("bootstrap_ci: scores 为空")
    if replicates < 1:
        raise ValidationError(f"replicates 必须 >= 1: {replicates}")
    point = float(arr.mean())
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(replicates, arr.size))
    means = arr[idx].mean(axis=1)
    low, high = np.percentile(means, [2.5, 97.5])
    return StatResult(
        point=point,
        ci_low=min(float(low), point),
        ci_high=max(float(high), point),
        n=int(arr.size),
        seed=seed,
    )


def topk_hits(records: Sequence[OutcomeRecord], k: int, matcher: Matcher = exact_match) -> list[float]:
    if k not in (1, 3):
        raise ValidationError(f"k 必须是 1 或 3: {k}")
    return [1.0 if any(matcher(r.gold, p) for p in r.predictions[:k]) else 0.0 for r in records]


def topk_accuracy(
    records: Sequence[OutcomeRecord],
    k: int,
    matcher: Matcher = exact_match,
    *,
    replicates: int = 1000,
    seed: int = 0,
) -> StatResult:
    if not records:
        raise StatsError("topk_accuracy: records 为空")
    return bootstrap_ci(topk_hits(records, k, matcher), replicates=replicates, seed=seed)


# =========================================================================
# 置换检验
# =========================================================================


def _pvalue(permuted: NDArray[np.float64], observed: float) -> float:
    k = int(np.count_nonzero(permuted >= observed - _EPS))
    return (k + 1) / (permuted.size + 1)


def _paired_diffs(a: Sequence[float], b: Sequence[float]) -> NDArray[np.float64]:
    xa, xb = _as_array(a), _as_array(b)
    if xa.size != xb.size:
        raise StatsError(f"length mismatch: {xa.size} vs {xb.size}")
    if xa.size == 0:
        raise StatsError("配对样本为空")
    return xa - xb


def paired_permutation_pvalue(a: Sequence[float], b: Sequence[float], permutations: int = 1000,
                              seed: int = 0) -> float:
    """双侧配对置换检验：随机交换每对预测（等价于对差值随机取符号）"""
    d = _paired_diffs(a, b)
    observed = abs(float(d.mean()))
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(permutations, d.size))
    permuted = np.abs((signs * d).mean(axis=1))
    return _pvalue(permuted, observed)


def exact_paired_pvalue(a: Sequence[float], b: Sequence[float]) -> float:
    """枚举全部 2^n 种符号分配的精确 p 值（不平滑，适用于 n <= 16）"""
    d = _paired_diffs(a, b)
    if d.size > 16:
        raise ValidationError(f"精确枚举仅支持 n <= 16: {d.size}")
    observed = abs(float(d.mean()))
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=d.size)))
    permuted = np.abs((signs * d).mean(axis=1))
    return float(np.count_nonzero(permuted >= observed - _EPS)) / permuted.size


def _canonical_groups(group_a: Sequence[float], group_b: Sequence[float]) -> tuple[NDArray, NDArray]:
    xa, xb = _as_array(group_a), _as_array(group_b)
    if xa.size == 0 or xb.size == 0:
        raise StatsError("非配对检验的分组不能为空")
    # 固定两组的先后顺序，使 p(A, B) 与 p(B, A) 走完全相同的计算
    first, second = sorted((xa, xb), key=lambda g: (g.size, g.tolist()))
    return first, second


def unpaired_permutation_pvalue(group_a: Sequence[float], group_b: Sequence[float], permutations: int = 1000,
                                seed: int = 0) -> float:
    """双侧非配对置换检验：随机重分组后比较组均值差"""
    first, second = _canonical_groups(group_a, group_b)
    pool = np.concatenate([first, second])
    n1 = first.size
    observed = abs(float(first.mean() - second.mean()))
    rng = np.random.default_rng(seed)
    shuffled = rng.permuted(np.tile(pool, (permutations, 1)), axis=1)
    permuted = np.abs(shuffled[:, :n1].mean(axis=1) - shuffled[:, n1:].mean(axis=1))
    return _pvalue(permuted, observed)


def exact_unpaired_pvalue(group_a: Sequence[float], group_b: Sequence[float]) -> float:
    """枚举全部 C(n, |A|) 种重分组的精确 p 值（不平滑）"""
    first, second = _canonical_groups(group_a, group_b)
    pool = np.concatenate([first, second])
    n1 = first.size
    observed = abs(float(first.mean() - second.mean()))
    total = pool.sum()
    hits = 0
    combos = 0
    for chosen in itertools.combinations(range(pool.size), n1):
        s1 = pool[list(chosen)].sum()
        diff = abs(s1 / n1 - (total - s1) / (pool.size - n1))
        if diff >= observed - _EPS:
            hits += 1
        combos += 1
    return hits / combos


# =========================================================================
# 探索汇总
# =========================================================================


@dataclass(frozen=True)
class ExplorationSummary:
    """每张切片按倍率分档的视野数及其均值 ± 样本标准差"""

    per_trace: list[dict[str, int]]
    mean: dict[str, float]
    sd: dict[str, float]

    @property
    def n(self) -> int:
        return len(self.per_trace)


def count_views(events: Sequence[TraceEvent], *, high_power: float = 10.0, medium_power: float = 2.5) -> dict[str, int]:
    counts = {c: 0 for c in MAG_CLASSES}
    for ev in events:
        if ev.kind is not EventKind.VIEW:
            continue
        try:
            mag = float(ev.payload["region"]["magnification"])
        except (KeyError, TypeError, ValueError) as e:
            raise TraceError(f"view 事件缺少 region.magnification (seq {ev.seq})") from e
        cls = "high" if mag >= high_power else "medium" if mag >= medium_power else "low"
        counts[cls] += 1
    counts["total"] = sum(counts[c] for c in MAG_CLASSES)
    return counts


def exploration_summary(traces: Sequence[Sequence[TraceEvent]], *, high_power: float = 10.0,
                        medium_power: float = 2.5) -> ExplorationSummary:
    if not traces:
        raise StatsError("exploration_summary: trace 集合为空")
    per_trace = [count_views(t, high_power=high_power, medium_power=medium_power) for t in traces]
    mean: dict[str, float] = {}
    sd: dict[str, float] = {}
    for key in (*MAG_CLASSES, "total"):
        values = np.array([c[key] for c in per_trace], dtype=np.float64)
        mean[key] = float(values.mean())
        sd[key] = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return ExplorationSummary(per_trace=per_trace, mean=mean, sd=sd)


# =========================================================================
# 分层
# =========================================================================


def _stratum_of(record: OutcomeRecord, key: str) -> str | None:
    value = getattr(record, key, None)
    if value is None:
        return None
    return value.value if isinstance(value, Confidence) else str(value)


def stratified_accuracy(
    records: Sequence[OutcomeRecord],
    key: str,
    strata: Sequence[str] | None = None,
    *,
    matcher: Matcher = exact_match,
    replicates: int = 1000,
    seed: int = 0,
) -> dict[str, StatResult]:
    """按记录属性分层的 top-1 准确率；空层省略并告警"""
    groups: dict[str, list[OutcomeRecord]] = {}
    for r in records:
        s = _stratum_of(r, key)
        if s is not None:
            groups.setdefault(s, []).append(r)
    names = list(strata) if strata is not None else sorted(groups)
    results: dict[str, StatResult] = {}
    for name in names:
        members = groups.get(name, [])
        if not members:
            logger.warning("分层 %s=%s 为空，已省略", key, name)
            continue
        results[name] = topk_accuracy(members, 1, matcher, replicates=replicates, seed=seed)
    return results


def confidence_stratified_accuracy(records: Sequence[OutcomeRecord], *, replicates: int = 1000,
                                   seed: int = 0) -> dict[str, StatResult]:
    return stratified_accuracy(
        records, "confidence", [Confidence.HIGH.value, Confidence.LOW.value], replicates=replicates, seed=seed,
    )


def compare_strata(records: Sequence[OutcomeRecord], key: str, stratum_a: str, stratum_b: str, *,
                   permutations: int = 1000, seed: int = 0, matcher: Matcher = exact_match) -> float:
    """两个分层的 top-1 命中做非配对置换检验"""
    a = [r for r in records if _stratum_of(r, key) == stratum_a]
    b = [r for r in records if _stratum_of(r, key) == stratum_b]
    return unpaired_permutation_pvalue(topk_hits(a, 1, matcher), topk_hits(b, 1, matcher),
                                       permutations=permutations, seed=seed)


# =========================================================================
# 输入
# =========================================================================


def outcome_from_dict(data: dict) -> OutcomeRecord:
    try:
        predictions = [str(p) for p in data["predictions"]]
        record = OutcomeRecord(
            case_id=str(data["case_id"]),
            gold=str(data["gold"]),
            predictions=predictions,
            confidence=Confidence(data["confidence"]),
            regions_by_mag={str(k): int(v) for k, v in (data.get("regions_by_mag") or {}).items()},
            rarity=None if data.get("rarity") is None else str(data["rarity"]),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise StatsError(f"OutcomeRecord 无效: {e}") from e
    if len(record.predictions) != 3:
        raise StatsError(f"case {record.case_id}: predictions 必须恰好 3 个，实际 {len(record.predictions)}")
    return record


def load_outcomes(path: str | Path) -> list[OutcomeRecord]:
    return [outcome_from_dict(row) for row in read_jsonl(path)]


def pair_records(a: Sequence[OutcomeRecord], b: Sequence[OutcomeRecord]) -> list[tuple[OutcomeRecord, OutcomeRecord]]:
    """按 case_id 对齐两个系统的结果"""
    if len(a) != len(b):
        raise StatsError(f"length mismatch: {len(a)} vs {len(b)}")
    by_id = {r.case_id: r for r in b}
    missing = [r.case_id for r in a if r.case_id not in by_id]
    if missing:
        raise StatsError(f"case_id 无法对齐: {missing[:5]}")
    return [(r, by_id[r.case_id]) for r in a]


