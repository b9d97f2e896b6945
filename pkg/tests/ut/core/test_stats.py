"""评估统计单元测试"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import hypergeom

from slideseek.core.exceptions import StatsError, TraceError, ValidationError
from slideseek.core.models import Confidence, EventKind, OutcomeRecord, TraceEvent
from slideseek.core.stats import (
    bootstrap_ci,
    compare_strata,
    confidence_stratified_accuracy,
    count_views,
    exact_match,
    exact_paired_pvalue,
    exact_unpaired_pvalue,
    exploration_summary,
    load_outcomes,
    outcome_from_dict,
    pair_records,
    paired_permutation_pvalue,
    stratified_accuracy,
    topk_accuracy,
    unpaired_permutation_pvalue,
)

GOLD = "adenocarcinoma"


def _record(case_id: str, rank: int | None, confidence: Confidence = Confidence.HIGH,
            rarity: str | None = None) -> OutcomeRecord:
    """rank 为金标准在预测中的位置（0 起），None 表示未命中"""
    preds = ["reactive atypia", "lymphoma", "squamous cell carcinoma"]
    if rank is not None:
        preds[rank] = GOLD
    return OutcomeRecord(case_id=case_id, gold=GOLD, predictions=preds, confidence=confidence, rarity=rarity)


def confidence_fixture() -> list[OutcomeRecord]:
    """96 个 High（87 对）与 54 个 Low（42 对）"""
    records = [_record(f"h{i:03d}", 0 if i < 87 else None) for i in range(96)]
    records += [_record(f"l{i:03d}", 0 if i < 42 else None, Confidence.LOW) for i in range(54)]
    return records


def _views(*mags: float) -> list[TraceEvent]:
    return [
        TraceEvent(seq=i, wall_time=float(i), actor="explorer:t000", kind=EventKind.VIEW,
                   payload={"region": {"x0": 0, "y0": 0, "x1": 10, "y1": 10, "magnification": m}})
        for i, m in enumerate(mags)
    ]


class TestMatcher:
    def test_case_and_whitespace(self) -> None:
        assert exact_match("Adenocarcinoma", "  adenocarcinoma ")
        assert exact_match("squamous cell  carcinoma", "Squamous Cell Carcinoma")
        assert not exact_match("adenocarcinoma", "adenoma")


class TestTopK:
    def test_rank_one_everywhere(self) -> None:
        r = topk_accuracy([_record(str(i), 0) for i in range(5)], 1)
        assert (r.point, r.ci_low, r.ci_high) == (1.0, 1.0, 1.0)

    def test_rank_three(self) -> None:
        records = [_record(str(i), 2) for i in range(5)]
        assert topk_accuracy(records, 1).point == 0.0
        assert topk_accuracy(records, 3).point == 1.0

    def test_eight_of_ten(self) -> None:
        records = [_record(str(i), 0 if i < 8 else None) for i in range(10)]
        r = topk_accuracy(records, 1, seed=3)
        assert r.point == pytest.approx(0.8)
        assert r.n == 10 and r.seed == 3
        assert r.ci_low <= 0.8 <= r.ci_high

    def test_invalid_k(self) -> None:
        with pytest.raises(ValidationError, match="k"):
            topk_accuracy([_record("a", 0)], 2)

    def test_empty(self) -> None:
        with pytest.raises(StatsError):
            topk_accuracy([], 1)


class TestBootstrap:
    def test_constant(self) -> None:
        r = bootstrap_ci([0.7] * 12)
        assert r.ci_low == pytest.approx(0.7) and r.ci_high == pytest.approx(0.7)

    def test_singleton(self) -> None:
        r = bootstrap_ci([1.0])
        assert (r.point, r.ci_low, r.ci_high, r.n) == (1.0, 1.0, 1.0, 1)

    def test_deterministic(self) -> None:
        scores = [1, 0, 1, 1, 0, 0, 1, 0, 1]
        assert bootstrap_ci(scores, seed=11) == bootstrap_ci(scores, seed=11)

    def test_errors(self) -> None:
        with pytest.raises(StatsError):
            bootstrap_ci([])
        with pytest.raises(ValidationError):
            bootstrap_ci([1.0], replicates=0)

    @pytest.mark.slow
    def test_coverage(self) -> None:
        rng = np.random.default_rng(2024)
        covered = 0
        for trial in range(200):
            scores = rng.integers(0, 2, size=100).astype(float)
            r = bootstrap_ci(scores.tolist(), replicates=1000, seed=trial)
            covered += r.ci_low <= 0.5 <= r.ci_high
        assert 0.90 <= covered / 200 <= 0.99


class TestPairedPermutation:
    def test_identical(self) -> None:
        assert paired_permutation_pvalue([1, 0, 1], [1, 0, 1]) == 1.0

    def test_exact_oracle(self) -> None:
        assert exact_paired_pvalue([1, 1, 0, 0], [0, 0, 0, 0]) == pytest.approx(0.5)
        p = paired_permutation_pvalue([1, 1, 0, 0], [0, 0, 0, 0], permutations=1000, seed=5)
        assert abs(p - 0.5) <= 3 * math.sqrt(0.25 / 1000)

    def test_extreme(self) -> None:
        assert paired_permutation_pvalue([1] * 20, [0] * 20, seed=1) <= 0.01

    def test_symmetric_and_in_range(self) -> None:
        a, b = [1, 0, 1, 1, 0, 1], [0, 0, 1, 0, 0, 0]
        p = paired_permutation_pvalue(a, b, seed=4)
        assert 0.0 < p <= 1.0
        assert p == paired_permutation_pvalue(b, a, seed=4)

    def test_length_mismatch(self) -> None:
        with pytest.raises(StatsError, match="length mismatch"):
            paired_permutation_pvalue([1, 0], [1])

    def test_exact_limit(self) -> None:
        with pytest.raises(ValidationError):
            exact_paired_pvalue([1] * 17, [0] * 17)


class TestUnpairedPermutation:
    def test_identical(self) -> None:
        assert unpaired_permutation_pvalue([1, 0, 1], [1, 0, 1]) == 1.0

    def test_exact_oracle(self) -> None:
        assert exact_unpaired_pvalue([1, 1], [0, 0]) == pytest.approx(2 / 6)

    def test_swap_symmetry(self) -> None:
        a, b = [1, 1, 0, 1, 1], [0, 1, 0]
        assert unpaired_permutation_pvalue(a, b, seed=9) == unpaired_permutation_pvalue(b, a, seed=9)
        assert exact_unpaired_pvalue(a, b) == exact_unpaired_pvalue(b, a)

    def test_empty_group(self) -> None:
        with pytest.raises(StatsError):
            unpaired_permutation_pvalue([], [1.0])


@pytest.mark.slow
class TestMonteCarloAgainstExact:
    """随机小样本上蒙特卡洛 p 与精确枚举相差不超过 3 个二项标准误（允许个别离群）"""

    PERMUTATIONS = 1000

    def _tolerance(self, p: float, k: float) -> float:
        return k * math.sqrt(p * (1 - p) / self.PERMUTATIONS) + 1 / (self.PERMUTATIONS + 1)

    def _check(self, pairs: list[tuple[float, float]]) -> None:
        outside = sum(abs(mc - ex) > self._tolerance(ex, 3) for mc, ex in pairs)
        assert outside <= 2
        assert all(abs(mc - ex) <= self._tolerance(ex, 5) for mc, ex in pairs)

    def test_paired(self) -> None:
        rng = np.random.default_rng(17)
        pairs = []
        for i in range(100):
            n = int(rng.integers(1, 13))
            a, b = rng.integers(0, 2, n).tolist(), rng.integers(0, 2, n).tolist()
            pairs.append((paired_permutation_pvalue(a, b, self.PERMUTATIONS, seed=i), exact_paired_pvalue(a, b)))
        self._check(pairs)

    def test_unpaired(self) -> None:
        rng = np.random.default_rng(23)
        pairs = []
        for i in range(100):
            na, nb = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            a, b = rng.integers(0, 2, na).tolist(), rng.integers(0, 2, nb).tolist()
            pairs.append((unpaired_permutation_pvalue(a, b, self.PERMUTATIONS, seed=i), exact_unpaired_pvalue(a, b)))
        self._check(pairs)


class TestExplorationSummary:
    def test_buckets(self) -> None:
        counts = count_views(_views(20, 20, 20, 5, 1.25))
        assert counts == {"high": 3, "medium": 1, "low": 1, "total": 5}

    def test_thresholds(self) -> None:
        counts = count_views(_views(10, 2.5, 2.4), high_power=10, medium_power=2.5)
        assert (counts["high"], counts["medium"], counts["low"]) == (1, 1, 1)

    def test_mean_and_sample_sd(self) -> None:
        summary = exploration_summary([_views(*[20] * 10), _views(*[20] * 20)])
        assert summary.n == 2
        assert summary.mean["total"] == pytest.approx(15.0)
        assert summary.sd["total"] == pytest.approx(math.sqrt(50))
        assert summary.sd["low"] == 0.0

    def test_empty_set(self) -> None:
        with pytest.raises(StatsError):
            exploration_summary([])

    def test_malformed_view(self) -> None:
        bad = TraceEvent(seq=0, wall_time=0.0, actor="explorer:t000", kind=EventKind.VIEW, payload={})
        with pytest.raises(TraceError):
            count_views([bad])


class TestStratification:
    def test_confidence_fixture(self) -> None:
        result = confidence_stratified_accuracy(confidence_fixture())
        assert round(result["High"].point, 3) == 0.906
        assert round(result["Low"].point, 3) == 0.778
        assert result["High"].n == 96 and result["Low"].n == 54

    def test_high_low_matches_hypergeometric(self) -> None:
        # Low 组错误数 X ~ 超几何(150, 21, 54)；|均值差| >= 观测值 <=> X >= 12 或 X <= 3
        exact = float(hypergeom.sf(11, 150, 21, 54) + hypergeom.cdf(3, 150, 21, 54))
        assert 0.04 < exact < 0.055
        p = compare_strata(confidence_fixture(), "confidence", "High", "Low", permutations=4000, seed=0)
        assert abs(p - exact) <= 4 * math.sqrt(exact * (1 - exact) / 4000) + 1 / 4001

    def test_high_low_significant_on_default_seed(self) -> None:
        p = compare_strata(confidence_fixture(), "confidence", "High", "Low")
        assert p < 0.05

    def test_nine_of_ten(self) -> None:
        records = [_record(str(i), 0 if i < 9 else None) for i in range(10)]
        assert confidence_stratified_accuracy(records)["High"].point == pytest.approx(0.9)

    def test_empty_stratum_omitted(self, caplog: pytest.LogCaptureFixture) -> None:
        records = [_record(str(i), 0, Confidence.LOW) for i in range(4)]
        with caplog.at_level("WARNING"):
            result = confidence_stratified_accuracy(records)
        assert list(result) == ["Low"]
        assert "High" in caplog.text

    def test_rarity_strata(self) -> None:
        records = [_record("a", 0, rarity="common"), _record("b", None, rarity="rare"), _record("c", 0)]
        result = stratified_accuracy(records, "rarity")
        assert sorted(result) == ["common", "rare"]
        assert result["rare"].point == 0.0


class TestOutcomeIO:
    def test_load(self, tmp_path: Path) -> None:
        path = tmp_path / "outcomes.jsonl"
        rows = [r.to_dict() for r in confidence_fixture()[:3]]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
        loaded = load_outcomes(path)
        assert [r.case_id for r in loaded] == ["h000", "h001", "h002"]
        assert loaded[0].confidence is Confidence.HIGH

    def test_wrong_prediction_count(self) -> None:
        with pytest.raises(StatsError, match="恰好 3 个"):
            outcome_from_dict({"case_id": "x", "gold": "a", "predictions": ["a"], "confidence": "High"})

    def test_bad_confidence(self) -> None:
        with pytest.raises(StatsError):
            outcome_from_dict({"case_id": "x", "gold": "a", "predictions": ["a", "b", "c"], "confidence": "Medium"})

    def test_pairing(self) -> None:
        a = [_record("x", 0), _record("y", None)]
        b = [_record("y", 0), _record("x", 1)]
        pairs = pair_records(a, b)
        assert [(p.case_id, q.case_id) for p, q in pairs] == [("x", "x"), ("y", "y")]
        with pytest.raises(StatsError, match="length mismatch"):
            pair_records(a, b[:1])
        with pytest.raises(StatsError, match="无法对齐"):
            pair_records(a, [_record("x", 0), _record("z", 0)])
