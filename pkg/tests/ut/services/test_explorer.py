"""探索者测试"""

from __future__ import annotations

from collections.abc import Callable

import pytest

from slideseek.core.config import Config
from slideseek.core.exceptions import ProtocolError
from slideseek.core.models import (
    EventKind,
    ExplorerState,
    LesionFocus,
    PyramidSlide,
    RasterImage,
    RegionSpec,
    TaskSpec,
)
from slideseek.core.protocols import TraceSink
from slideseek.core.schemas import ExplorerDecision
from slideseek.core.trace import TraceAppender, TraceBuffer
from slideseek.services.captioner import MockCaptioner
from slideseek.services.explorer import Explorer, roi_id
from slideseek.services.policies import SweepExplorerPolicy
from tests.conftest import mock_config

SURVEY = RegionSpec(256, 256, 1792, 1792, 5)


class ReplayPolicy:
    """依次返回预设决策，记录收到的反馈"""

    def __init__(self, *decisions: ExplorerDecision) -> None:
        self.decisions = list(decisions)
        self.feedback: list[str | None] = []

    def next_action(self, state: ExplorerState, slide: PyramidSlide, thumbnail: Callable[[], RasterImage],
                    feedback: str | None = None, sink: TraceSink | None = None) -> ExplorerDecision:
        self.feedback.append(feedback)
        return self.decisions.pop(0)


def _view(x0: int, y0: int, x1: int, y1: int, mag: float = 5) -> ExplorerDecision:
    return ExplorerDecision(action="view", x0=x0, y0=y0, x1=x1, y1=y1, magnification=mag)


def _task(budget: int = 4) -> TaskSpec:
    return TaskSpec(task_id="t001", tissue_box_index=0, region=SURVEY, features_to_document="glands",
                    context="lesion present", budget=budget, round=2)


def _explorer(slide: PyramidSlide, policy: object | None = None, config: Config | None = None) -> Explorer:
    config = config or mock_config()
    captioner = MockCaptioner([LesionFocus(700, 700, 1000, 1000, "adenocarcinoma")], label_map=config.label_map)
    return Explorer(slide=slide, captioner=captioner, policy=policy or SweepExplorerPolicy(config),  # type: ignore[arg-type]
                    config=config)


class TestExplorer:
    def test_roi_id(self) -> None:
        assert roi_id("t001", 3) == "t001-v03"

    def test_sweep_task(self, lesion_slide: PyramidSlide) -> None:
        sink = TraceAppender()
        report = _explorer(lesion_slide).run_task(_task(), sink)
        assert report.views_used == 4
        assert [r.roi_id for r in report.rois] == ["t001-v00", "t001-v01", "t001-v02", "t001-v03"]
        assert [r.flagged_relevant for r in report.rois] == [True, False, False, False]
        assert all(r.round == 2 and r.source_task == "t001" for r in report.rois)
        kinds = [e.kind for e in sink.events]
        assert kinds == [EventKind.VIEW, EventKind.CAPTION] * 4 + [EventKind.REPORT]
        view_payload = sink.events[0].payload
        assert (view_payload["width"], view_payload["height"]) == (224, 224)
        assert len(view_payload["image_digest"]) == 64

    def test_budget_one(self, lesion_slide: PyramidSlide) -> None:
        sink = TraceAppender()
        report = _explorer(lesion_slide).run_task(_task(budget=1), sink)
        assert report.views_used == 1
        assert [e.kind for e in sink.events] == [EventKind.VIEW, EventKind.CAPTION, EventKind.REPORT]

    def test_invalid_view_repaired(self, lesion_slide: PyramidSlide) -> None:
        policy = ReplayPolicy(_view(0, 0, 512, 512), _view(256, 256, 1152, 1152),
                              ExplorerDecision(action="submit", findings="glands", key_view_indices=[0]))
        sink = TraceAppender()
        report = _explorer(lesion_slide, policy).run_task(_task(), sink)
        assert report.views_used == 1 and report.rois[0].flagged_relevant
        assert policy.feedback[1] is not None and "超出任务区域" in policy.feedback[1]
        assert sink.events[0].kind is EventKind.REPAIR

    def test_invalid_twice_forces_submit(self, lesion_slide: PyramidSlide) -> None:
        policy = ReplayPolicy(_view(0, 0, 512, 512), _view(256, 256, 512, 512, mag=3))
        report = _explorer(lesion_slide, policy).run_task(_task(), TraceBuffer())
        assert report.views_used == 0
        assert report.findings.startswith("partial findings (invalid view after repair)")

    def test_view_after_budget_exhausted(self, lesion_slide: PyramidSlide) -> None:
        policy = ReplayPolicy(_view(256, 256, 1152, 1152), _view(256, 256, 1152, 1152),
                              _view(256, 256, 1152, 1152))
        report = _explorer(lesion_slide, policy).run_task(_task(budget=1), TraceBuffer())
        assert report.views_used == 1
        assert policy.feedback[1] == "the view budget is exhausted; you must submit"
        assert report.findings.startswith("partial findings")
        assert report.rois[0].flagged_relevant

    def test_missing_coordinates(self, lesion_slide: PyramidSlide) -> None:
        policy = ReplayPolicy(ExplorerDecision(action="view"), ExplorerDecision(action="submit", findings="x"))
        report = _explorer(lesion_slide, policy).run_task(_task(), TraceBuffer())
        assert "缺少坐标" in (policy.feedback[1] or "")
        assert report.findings == "x"

    def test_out_of_range_key_views_ignored(self, lesion_slide: PyramidSlide) -> None:
        policy = ReplayPolicy(ExplorerDecision(action="submit", findings="", key_view_indices=[5]))
        report = _explorer(lesion_slide, policy).run_task(_task(), TraceBuffer())
        assert report.rois == [] and report.findings

    def test_step_after_done(self, lesion_slide: PyramidSlide) -> None:
        state = ExplorerState.start(_task())
        state.done = True
        with pytest.raises(ProtocolError):
            _explorer(lesion_slide).step(state, TraceBuffer())
