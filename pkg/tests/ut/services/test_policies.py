"""智能体策略测试"""

from __future__ import annotations

import numpy as np
import pytest

from slideseek.core.config import Config
from slideseek.core.models import (
    ExplorerReport,
    ExplorerState,
    PyramidSlide,
    RegionSpec,
    ROIRecord,
    SupervisorState,
    TaskSpec,
    TissueBox,
)
from slideseek.core.protocols import SupervisorContext
from slideseek.services.decision import RetryPolicy
from slideseek.services.policies import (
    BENIGN_ONLY,
    LESION_PRESENT,
    NO_FINDINGS,
    LLMExplorerPolicy,
    LLMSupervisorPolicy,
    ScriptedSupervisorPolicy,
    SingleAgentPolicy,
    SweepExplorerPolicy,
    is_flagged,
    sweep_cells,
)
from tests.conftest import ScriptedBackend

BOX = TissueBox(0, 256, 256, 1792, 1792)


@pytest.fixture()
def ctx(lesion_slide: PyramidSlide) -> SupervisorContext:
    return SupervisorContext(slide=lesion_slide, tissue_boxes=[BOX], clinical_context="",
                             thumbnail=lambda: np.zeros((8, 8, 3), dtype=np.uint8))


def _task(task_id: str, region: RegionSpec, budget: int = 4, round_: int = 1) -> TaskSpec:
    return TaskSpec(task_id=task_id, tissue_box_index=0, region=region, features_to_document="glands",
                    context="", budget=budget, round=round_)


def _roi(roi_id: str, region: RegionSpec, flagged: bool = True, caption: str = "atypical") -> ROIRecord:
    return ROIRecord(roi_id=roi_id, region=region, caption=caption, source_task=roi_id[:4], flagged_relevant=flagged)


def _state(*tasks: TaskSpec, round_: int = 1) -> SupervisorState:
    return SupervisorState(slide_id="lesion", hypotheses=[LESION_PRESENT, BENIGN_ONLY], plan="p",
                           pending_tasks=list(tasks), round=round_, next_task_seq=len(tasks), tissue_boxes=[BOX])


class TestSweep:
    def test_survey_cells(self) -> None:
        cells = sweep_cells(BOX.region(5), Config(), 20)
        assert [(c.x0, c.y0, c.x1, c.y1) for c in cells] == [
            (256, 256, 1152, 1152), (1152, 256, 1792, 1152), (256, 1152, 1152, 1792), (1152, 1152, 1792, 1792)]

    def test_coarse_single_cell(self) -> None:
        assert sweep_cells(BOX.region(1.25), Config(), 20) == [BOX.region(1.25)]

    def test_detail_cell(self) -> None:
        cells = sweep_cells(RegionSpec(256, 256, 1152, 1152, 20), Config(), 20)
        assert cells == [RegionSpec(256, 256, 1152, 1152, 20)]

    def test_flag_terms(self) -> None:
        assert is_flagged("Architecturally ATYPICAL area", ["atypical"])
        assert not is_flagged("unremarkable tissue", ["atypical", "adenocarcinoma"])


class TestScriptedSupervisor:
    def test_initial_one_task_per_box(self, ctx: SupervisorContext) -> None:
        d = ScriptedSupervisorPolicy(Config()).initial(ctx)
        assert d.hypotheses == [LESION_PRESENT, BENIGN_ONLY]
        [task] = d.tasks
        assert (task.x0, task.y0, task.x1, task.y1, task.magnification) == (256, 256, 1792, 1792, 1.25)
        assert task.budget == 1

    def test_initial_no_tissue(self, ctx: SupervisorContext) -> None:
        empty = SupervisorContext(ctx.slide, [], "", ctx.thumbnail)
        assert ScriptedSupervisorPolicy(Config()).initial(empty).tasks == []

    def test_plan_finishes_when_queue_empty(self, ctx: SupervisorContext) -> None:
        policy = ScriptedSupervisorPolicy(Config())
        assert policy.plan(_state(), ctx).finished
        queued = _task("t000", BOX.region(1.25), round_=0)
        assert not policy.plan(_state(queued), ctx).finished

    def test_review_escalates_flagged(self, ctx: SupervisorContext) -> None:
        policy = ScriptedSupervisorPolicy(Config())
        task = _task("t000", BOX.region(1.25))
        roi = _roi("t000-v00", BOX.region(1.25))
        report = ExplorerReport("t000", "f", [roi], 1)
        d = policy.review(_state(task), ctx, [report])
        [follow] = d.follow_up_tasks
        assert follow.magnification == 5.0 and follow.tissue_box_index == 0
        assert follow.budget == 4
        assert d.relevance == {"t000-v00": 0.25}
        assert d.hypotheses[0] == LESION_PRESENT

    def test_review_top_of_ladder(self, ctx: SupervisorContext) -> None:
        policy = ScriptedSupervisorPolicy(Config())
        region = RegionSpec(256, 256, 1152, 1152, 20)
        report = ExplorerReport("t002", "f", [_roi("t002-v00", region)], 1)
        d = policy.review(_state(_task("t002", region)), ctx, [report])
        assert d.follow_up_tasks == []
        assert d.relevance == {"t002-v00": 1.0}

    def test_review_benign_promotes(self, ctx: SupervisorContext) -> None:
        policy = ScriptedSupervisorPolicy(Config())
        report = ExplorerReport("t000", NO_FINDINGS, [_roi("t000-v00", BOX.region(1.25), flagged=False)], 1)
        d = policy.review(_state(_task("t000", BOX.region(1.25))), ctx, [report])
        assert d.hypotheses[0] == BENIGN_ONLY
        assert d.relevance == {"t000-v00": 0.0}

    def test_report_confidence(self, ctx: SupervisorContext) -> None:
        policy = ScriptedSupervisorPolicy(Config())
        high = _roi("t002-v00", RegionSpec(256, 256, 1152, 1152, 20), caption="adenocarcinoma: atypical cells")
        low = _roi("t000-v00", BOX.region(1.25))
        diagnoses = ["adenocarcinoma", "squamous cell carcinoma", "reactive atypia"]
        d = policy.report(_state(), ctx, [high, low], diagnoses)
        assert d.confidence == "High"
        assert d.cited_roi_ids == ["t002-v00", "t000-v00"]
        assert "[t002-v00]" in d.narrative
        assert policy.report(_state(), ctx, [low], diagnoses).confidence == "Low"


class TestSingleAgent:
    def test_whole_slide_task(self, ctx: SupervisorContext) -> None:
        [task] = SingleAgentPolicy(Config()).initial(ctx).tasks
        assert (task.x0, task.y0, task.x1, task.y1) == (0, 0, 2048, 2048)
        assert task.tissue_box_index is None

    def test_no_follow_ups(self, ctx: SupervisorContext) -> None:
        report = ExplorerReport("t000", "f", [_roi("t000-v00", RegionSpec(0, 0, 896, 896, 5))], 1)
        d = SingleAgentPolicy(Config()).review(_state(_task("t000", RegionSpec(0, 0, 2048, 2048, 5))), ctx, [report])
        assert d.follow_up_tasks == []
        assert d.relevance == {"t000-v00": 1.0}


class TestSweepExplorer:
    def test_views_then_submit(self, lesion_slide: PyramidSlide) -> None:
        policy = SweepExplorerPolicy(Config())
        state = ExplorerState.start(_task("t001", BOX.region(5)))
        d = policy.next_action(state, lesion_slide, lambda: np.zeros((1, 1, 3), np.uint8))
        assert d.action == "view" and (d.x0, d.y0, d.x1, d.y1) == (256, 256, 1152, 1152)
        for i, cell in enumerate(sweep_cells(state.task.region, Config(), 20)):
            state.visited.append(cell)
            state.captions.append((cell, "adenocarcinoma: atypical" if i == 0 else "unremarkable tissue"))
            state.views_remaining -= 1
        d = policy.next_action(state, lesion_slide, lambda: np.zeros((1, 1, 3), np.uint8))
        assert d.action == "submit"
        assert d.key_view_indices == [0]
        assert d.findings.startswith("view 0:")

    def test_budget_exhausted_submits(self, lesion_slide: PyramidSlide) -> None:
        state = ExplorerState.start(_task("t001", BOX.region(5), budget=0))
        d = SweepExplorerPolicy(Config()).next_action(state, lesion_slide, lambda: np.zeros((1, 1, 3), np.uint8))
        assert d.action == "submit" and d.findings == NO_FINDINGS


class TestLLMPolicies:
    def test_supervisor_initial(self, ctx: SupervisorContext) -> None:
        reply = ('{"hypotheses": ["adenocarcinoma"], "plan": "scan", "current_step": "low power", '
                 '"justification": "start", "tasks": [{"x0": 256, "y0": 256, "x1": 1792, "y1": 1792, '
                 '"magnification": 1.25, "features_to_document": "architecture"}]}')
        backend = ScriptedBackend(reply)
        d = LLMSupervisorPolicy(backend, Config(), RetryPolicy(0, 0.0)).initial(ctx)
        assert d.tasks[0].budget is None
        [turn] = backend.calls[0]
        assert "box 0: 256 256 1792 1792" in turn.text
        assert len(turn.images) == 1

    def test_supervisor_review_without_reports_skips_backend(self, ctx: SupervisorContext) -> None:
        backend = ScriptedBackend()
        d = LLMSupervisorPolicy(backend, Config(), RetryPolicy(0, 0.0)).review(_state(), ctx, [])
        assert d.follow_up_tasks == [] and backend.calls == []

    def test_explorer_prompt_and_feedback(self, lesion_slide: PyramidSlide) -> None:
        backend = ScriptedBackend('{"action": "submit", "findings": "none"}')
        state = ExplorerState.start(_task("t004", BOX.region(5)))
        d = LLMExplorerPolicy(backend, Config(), RetryPolicy(0, 0.0)).next_action(
            state, lesion_slide, lambda: np.zeros((4, 4, 3), np.uint8), feedback="out of bounds",
        )
        assert d.action == "submit"
        [turn] = backend.calls[0]
        assert "t004" in turn.text and "out of bounds" in turn.text
