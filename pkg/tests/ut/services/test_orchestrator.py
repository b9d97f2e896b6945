"""ExplorationOrchestrator 单元测试（mock 后端，无网络）"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from slideseek.core.config import Config
from slideseek.core.exceptions import BackendError, PlanningError
from slideseek.core.models import Confidence, EventKind, SupervisorState, TissueBox
from slideseek.core.protocols import CaptionRequest, SupervisorContext
from slideseek.core.schemas import PlanDecision
from slideseek.core.trace import check_trace, fold_states, read_trace
from slideseek.services import exploration_orchestrator as orchestrator_mod
from slideseek.services.captioner import LESION_PHRASES
from slideseek.services.container import ServiceContainer
from slideseek.services.exploration_orchestrator import (
    OUTCOME_NAME,
    THUMBNAIL_NAME,
    TRACE_NAME,
    ExplorationOrchestrator,
    ExplorationPlan,
    ExplorationReport,
)
from slideseek.services.policies import ScriptedSupervisorPolicy
from tests.conftest import mock_config
from tests.ut.services.test_supervisor import AlwaysIHCPolicy


def _run(slide_dir: Path, out: Path, config: Config | None = None) -> ExplorationReport:
    container = ServiceContainer(config=config or mock_config())
    return ExplorationOrchestrator(container).run(ExplorationPlan(slide_path=str(slide_dir), out_dir=str(out)))


class TestExplorationPlan:
    def test_defaults(self) -> None:
        plan = ExplorationPlan(slide_path="s", out_dir="o")
        assert plan.context == ""

    def test_report_success(self) -> None:
        report = ExplorationReport(plan=ExplorationPlan("s", "o"))
        assert not report.success
        assert report.status == "pending"


class TestMockRun:
    def test_lesion_slide(self, lesion_slide_dir: Path, tmp_path: Path) -> None:
        result = _run(lesion_slide_dir, tmp_path)
        assert result.success
        report = result.report
        assert report is not None
        assert report.primary_diagnosis == "adenocarcinoma"
        assert report.differentials == ["squamous cell carcinoma", "reactive atypia"]
        assert report.confidence is Confidence.HIGH
        assert [r.roi_id for r in report.cited_rois] == ["t002-v00", "t001-v00", "t000-v00"]
        assert (report.rounds, report.views) == (4, 6)
        assert [s["step"] for s in result.steps] == [
            "detect_tissue", "init_supervisor", "explore", "collate", "finalize", "write_artifacts"]
        names = {Path(p).name for p in result.artifacts}
        assert names == {"report.md", "report.json", THUMBNAIL_NAME, OUTCOME_NAME}

    def test_lesion_trace(self, lesion_slide_dir: Path, tmp_path: Path) -> None:
        _run(lesion_slide_dir, tmp_path)
        events = read_trace(tmp_path / TRACE_NAME)
        assert check_trace(events) == []
        kinds = [e.kind for e in events]
        assert kinds.count(EventKind.PLAN) == kinds.count(EventKind.REVIEW) == 4
        issued = [e.payload["task"] for e in events if e.kind is EventKind.TASK_ISSUED]
        assert [(t["task_id"], t["region"]["magnification"]) for t in issued] == [
            ("t000", 1.25), ("t001", 5.0), ("t002", 20.0)]
        assert fold_states(events)[-1].finished
        assert [e.wall_time for e in events] == [float(e.seq) for e in events]
        assert events[-1].payload["status"] == "completed"

    def test_outcome_record(self, lesion_slide_dir: Path, tmp_path: Path) -> None:
        _run(lesion_slide_dir, tmp_path)
        record = json.loads((tmp_path / OUTCOME_NAME).read_text(encoding="utf-8"))
        assert record["gold"] == "adenocarcinoma"
        assert record["predictions"][0] == "adenocarcinoma"
        assert record["regions_by_mag"] == {"high": 1, "medium": 4, "low": 1}

    def test_benign_slide(self, benign_slide_dir: Path, tmp_path: Path) -> None:
        result = _run(benign_slide_dir, tmp_path)
        assert result.report is not None
        assert result.report.primary_diagnosis == "non-diagnostic"
        assert result.report.rounds == 2
        assert not (tmp_path / OUTCOME_NAME).exists()

    def test_blank_slide(self, blank_slide_dir: Path, tmp_path: Path) -> None:
        result = _run(blank_slide_dir, tmp_path)
        assert result.report is not None
        assert (result.report.rounds, result.report.views) == (1, 0)
        events = read_trace(tmp_path / TRACE_NAME)
        assert not any(e.kind is EventKind.TASK_ISSUED for e in events)

    def test_byte_identical_reruns(self, lesion_slide_dir: Path, tmp_path: Path) -> None:
        _run(lesion_slide_dir, tmp_path / "a")
        _run(lesion_slide_dir, tmp_path / "b")
        _run(lesion_slide_dir, tmp_path / "serial", mock_config(parallelism=1))
        for name in (TRACE_NAME, "report.json", "report.md", THUMBNAIL_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        # 并行度写在 init 的配置里，因此只比对报告与缩略图
        for name in ("report.json", "report.md", THUMBNAIL_NAME):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "serial" / name).read_bytes()

    def test_single_agent(self, lesion_slide_dir: Path, tmp_path: Path) -> None:
        result = _run(lesion_slide_dir, tmp_path, mock_config(mode="single_agent"))
        assert result.report is not None
        assert result.report.primary_diagnosis == "adenocarcinoma"
        assert result.report.rounds == 2


class TestAbort:
    def test_backend_failure(self, lesion_slide_dir: Path, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        container = ServiceContainer(config=mock_config())
        captioner = container.make_captioner(str(lesion_slide_dir))

        def _down(request: CaptionRequest) -> str:
            raise BackendError("captioner down", "http://cap")

        monkeypatch.setattr(captioner, "caption", _down)
        monkeypatch.setattr(container, "make_captioner", lambda *a, **k: captioner)
        with pytest.raises(BackendError, match="captioner down"):
            ExplorationOrchestrator(container).run(ExplorationPlan(str(lesion_slide_dir), str(tmp_path)))
        events = read_trace(tmp_path / TRACE_NAME)
        failed = [e for e in events if e.kind is EventKind.REPORT and e.payload["failed"]]
        assert [e.payload["task_id"] for e in failed] == ["t000"]
        assert events[-1].payload["status"] == "aborted"
        assert events[-1].payload["error_code"] == "BACKEND_ERROR"
        assert not (tmp_path / "report.json").exists()

    def test_planning_failure(self, lesion_slide_dir: Path, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        container = ServiceContainer(config=mock_config())
        monkeypatch.setattr(container, "make_supervisor_policy", lambda *a: AlwaysIHCPolicy(container.config))
        with pytest.raises(PlanningError):
            ExplorationOrchestrator(container).run(ExplorationPlan(str(lesion_slide_dir), str(tmp_path)))
        events = read_trace(tmp_path / TRACE_NAME)
        assert [e.kind for e in events] == [EventKind.REPAIR, EventKind.FINALIZE]
        assert events[-1].payload["error_code"] == "PLANNING_ERROR"


class _CrashingPlanPolicy(ScriptedSupervisorPolicy):
    def plan(self, state: SupervisorState, ctx: SupervisorContext, feedback: str | None = None) -> PlanDecision:
        raise ZeroDivisionError("division by zero")


class TestUnexpectedFailure:
    def test_before_supervisor(self, lesion_slide_dir: Path, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        def _broken(*args: object, **kwargs: object) -> list[TissueBox]:
            raise RuntimeError("detector crashed")

        monkeypatch.setattr(orchestrator_mod, "detect_tissue", _broken)
        with pytest.raises(RuntimeError, match="detector crashed"):
            _run(lesion_slide_dir, tmp_path)
        [event] = read_trace(tmp_path / TRACE_NAME)
        assert event.kind is EventKind.FINALIZE
        assert event.payload["status"] == "aborted"
        assert event.payload["error_code"] == "INTERNAL_ERROR"
        assert "RuntimeError: detector crashed" in event.payload["error"]

    def test_inside_loop(self, lesion_slide_dir: Path, tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
        container = ServiceContainer(config=mock_config())
        monkeypatch.setattr(container, "make_supervisor_policy", lambda *a: _CrashingPlanPolicy(container.config))
        with pytest.raises(ZeroDivisionError):
            ExplorationOrchestrator(container).run(ExplorationPlan(str(lesion_slide_dir), str(tmp_path)))
        events = read_trace(tmp_path / TRACE_NAME)
        assert [e.kind for e in events] == [EventKind.INIT, EventKind.FINALIZE]
        assert events[-1].payload["error_code"] == "INTERNAL_ERROR"
        assert check_trace(events) == []

    def test_explorer_bug_is_task_failure(self, lesion_slide_dir: Path, tmp_path: Path,
                                          monkeypatch: pytest.MonkeyPatch) -> None:
        container = ServiceContainer(config=mock_config())
        policy = container.make_explorer_policy()

        def _bug(*args: object, **kwargs: object) -> None:
            raise IndexError("view index out of range")

        monkeypatch.setattr(policy, "next_action", _bug)
        monkeypatch.setattr(container, "make_explorer_policy", lambda: policy)
        result = ExplorationOrchestrator(container).run(ExplorationPlan(str(lesion_slide_dir), str(tmp_path)))
        events = read_trace(tmp_path / TRACE_NAME)
        failed = [e for e in events if e.kind is EventKind.REPORT and e.payload["failed"]]
        assert failed and all("IndexError" in e.payload["error"] for e in failed)
        assert result.report is not None
        assert events[-1].payload["status"] == "completed"


class TestSeed:
    @pytest.mark.parametrize("seed", [1, 2])
    def test_seed_changes_captions_not_diagnosis(self, lesion_slide_dir: Path, tmp_path: Path, seed: int) -> None:
        result = _run(lesion_slide_dir, tmp_path, mock_config(seed=seed))
        assert result.report is not None
        assert result.report.primary_diagnosis == "adenocarcinoma"
        assert result.report.confidence is Confidence.HIGH
        captions = [e.payload["caption"] for e in read_trace(tmp_path / TRACE_NAME) if e.kind is EventKind.CAPTION]
        assert f"adenocarcinoma: {LESION_PHRASES[seed]}" in captions
