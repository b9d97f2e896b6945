"""探索者：在分配的区域内逐步选择视野、获取描述并提交报告

每个任务独立运行，只共享只读的切片与 trace 接收端（轮次内为任务私有的 TraceBuffer）。
视野越界或倍率不受支持时发起一次修复，仍无效则以已有发现强制提交。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from slideseek.core.config import Config
from slideseek.core.exceptions import ProtocolError
from slideseek.core.models import (
    EventKind,
    ExplorerReport,
    ExplorerState,
    NavigationAction,
    PyramidSlide,
    RasterImage,
    RegionSpec,
    ROIRecord,
    Submit,
    TaskSpec,
    View,
    explorer_actor,
)
from slideseek.core.protocols import Captioner, ExplorerPolicy, TraceSink
from slideseek.core.schemas import ExplorerDecision
from slideseek.core.slide_store import image_digest, read_region, render_thumbnail
from slideseek.core.validation import validate_view
from slideseek.services.captioner import caption_region
from slideseek.services.policies import NO_FINDINGS, flag_terms, is_flagged

logger = logging.getLogger(__name__)


def roi_id(task_id: str, index: int) -> str:
    return f"{task_id}-v{index:02d}"


@dataclass
class Explorer:
    """探索者：同一实例可被一轮内的多个线程并发使用（自身无可变状态）"""

    slide: PyramidSlide
    captioner: Captioner
    policy: ExplorerPolicy
    config: Config

    def _thumbnail(self, state: ExplorerState) -> RasterImage:
        return render_thumbnail(
            self.slide, state.visited, self.config.thumbnail_edge,
            high_power=self.config.high_power, medium_power=self.config.medium_power,
        )

    def _region_of(self, decision: ExplorerDecision) -> RegionSpec | None:
        d = decision
        if d.x0 is None or d.y0 is None or d.x1 is None or d.y1 is None or d.magnification is None:
            return None
        return RegionSpec(d.x0, d.y0, d.x1, d.y1, d.magnification)

    def _check(self, state: ExplorerState, decision: ExplorerDecision) -> tuple[RegionSpec | None, list[str]]:
        region = self._region_of(decision)
        if region is None:
            return None, ["view 动作缺少坐标或倍率"]
        allowed = self.slide.allowed_magnifications(self.config.magnifications)
        return region, validate_view(region, state.task, self.slide, allowed=allowed)

    def compose_report(self, state: ExplorerState, findings: str, key_views: list[int]) -> ExplorerReport:
        """每个已访问视野都成为 ROI；关键视野标记为 flagged_relevant"""
        task = state.task
        key = {i for i in key_views if 0 <= i < len(state.captions)}
        rois = [
            ROIRecord(
                roi_id=roi_id(task.task_id, i),
                region=region,
                caption=caption,
                source_task=task.task_id,
                flagged_relevant=i in key,
                round=task.round,
            )
            for i, (region, caption) in enumerate(state.captions)
        ]
        return ExplorerReport(
            task_id=task.task_id,
            findings=findings.strip() or NO_FINDINGS,
            rois=rois,
            views_used=len(state.visited),
        )

    def _forced_submit(self, state: ExplorerState, reason: str) -> Submit:
        terms = flag_terms(self.config)
        key = [i for i, (_, caption) in enumerate(state.captions) if is_flagged(caption, terms)]
        partial = "; ".join(f"view {i}: {state.captions[i][1]}" for i in key) or NO_FINDINGS
        return Submit(self.compose_report(state, f"partial findings ({reason}): {partial}", key))

    def step(self, state: ExplorerState, sink: TraceSink) -> NavigationAction:
        """询问策略下一步动作；预算耗尽时只接受 Submit"""
        if state.done:
            raise ProtocolError(f"任务 {state.task.task_id} 已提交，不能继续导航")
        actor = explorer_actor(state.task.task_id)
        feedback: str | None = None
        if state.views_remaining <= 0:
            feedback = "the view budget is exhausted; you must submit"
        for attempt in range(2):
            decision = self.policy.next_action(
                state, self.slide, lambda: self._thumbnail(state), feedback=feedback, sink=sink,
            )
            if decision.action == "submit":
                return Submit(self.compose_report(state, decision.findings, decision.key_view_indices))
            region: RegionSpec | None = None
            problems = ["view requested after the view budget was exhausted"]
            if state.views_remaining > 0:
                region, problems = self._check(state, decision)
            if not problems and region is not None:
                return View(region=region, rationale=decision.rationale)
            if attempt == 0:
                logger.info("探索者视野无效，发起修复: %s %s", state.task.task_id, problems)
                sink.emit(actor, EventKind.REPAIR, {"task_id": state.task.task_id, "problems": problems})
                feedback = "; ".join(problems)
        logger.warning("探索者修复后仍无效，强制提交: %s", state.task.task_id)
        return self._forced_submit(state, "invalid view after repair")

    def _apply_view(self, state: ExplorerState, view: View, sink: TraceSink) -> None:
        task = state.task
        actor = explorer_actor(task.task_id)
        image = read_region(self.slide, view.region, self.config.max_edge)
        h, w = image.shape[:2]
        sink.emit(actor, EventKind.VIEW, {
            "task_id": task.task_id,
            "index": len(state.visited),
            "region": view.region.to_dict(),
            "rationale": view.rationale,
            "width": w,
            "height": h,
            "image_digest": image_digest(image),
        })
        _, caption = caption_region(
            self.slide, view.region, self.captioner,
            max_edge=self.config.max_edge, sink=sink, actor=actor, image=image,
        )
        state.visited.append(view.region)
        state.captions.append((view.region, caption))
        state.rationales.append(view.rationale)
        state.views_remaining -= 1

    def run_task(self, task: TaskSpec, sink: TraceSink) -> ExplorerReport:
        """执行任务直到提交，返回报告并写入 report 事件

        Raises:
            BackendError: 后端重试耗尽
        """
        state = ExplorerState.start(task)
        while not state.done:
            action = self.step(state, sink)
            if isinstance(action, View):
                self._apply_view(state, action, sink)
                continue
            state.done = True
            state.report = action.report
        report = state.report
        assert report is not None
        sink.emit(explorer_actor(task.task_id), EventKind.REPORT, report.to_dict())
        logger.info("探索任务完成: %s (%d 视野, %d 个标记 ROI)", task.task_id, report.views_used,
                    sum(r.flagged_relevant for r in report.rois), extra={"task_id": task.task_id})
        return report
