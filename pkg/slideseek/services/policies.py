"""智能体策略

两类实现共用 core.protocols 中的协议：
  - LLMSupervisorPolicy / LLMExplorerPolicy: 渲染提示词模板，经 decide() 获取结构化决策
  - ScriptedSupervisorPolicy / SingleAgentPolicy / SweepExplorerPolicy: 确定性脚本策略，
    让整个系统无需模型即可端到端运行与测试

脚本监督者的倍率阶梯：coarse (1.25x) -> survey (5x) -> detail (20x)。
每个被标记的 ROI 在下一级倍率上排队一次复查，直到 detail 级别。
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from typing import TypeVar

from pydantic import BaseModel

from slideseek.core.config import Config
from slideseek.core.models import (
    ExplorerReport,
    ExplorerState,
    PyramidSlide,
    RasterImage,
    RegionSpec,
    ROIRecord,
    SupervisorState,
    TaskSpec,
    explorer_actor,
)
from slideseek.core.protocols import ChatBackend, ChatTurn, SupervisorContext, TraceSink
from slideseek.core.schemas import (
    ExplorerDecision,
    InitDecision,
    PlanDecision,
    ReportDecision,
    ReviewDecision,
    TaskDraft,
)
from slideseek.prompts import render_prompt
from slideseek.services.decision import RetryPolicy, decide

logger = logging.getLogger(__name__)

D = TypeVar("D", bound=BaseModel)

LESION_PRESENT = "lesion present"
BENIGN_ONLY = "benign only"
NO_FINDINGS = "no tissue features of concern identified"


# =========================================================================
# 共用工具
# =========================================================================


def sweep_cells(region: RegionSpec, config: Config, base_magnification: float) -> list[RegionSpec]:
    """把任务区域按倍率对应的格子边长切分，行优先，边缘格子裁剪到区域内"""
    cell_px = config.sweep_cell_px[config.magnification_class(region.magnification)]
    edge = max(1, round(cell_px * base_magnification / region.magnification))
    return [
        RegionSpec(x, y, min(x + edge, region.x1), min(y + edge, region.y1), region.magnification)
        for y in range(region.y0, region.y1, edge)
        for x in range(region.x0, region.x1, edge)
    ]


def sweep_budget(region: RegionSpec, config: Config, base_magnification: float) -> int:
    return max(1, min(len(sweep_cells(region, config, base_magnification)), config.max_task_budget))


def flag_terms(config: Config) -> list[str]:
    return [*config.flag_keywords, *config.label_map]


def is_flagged(caption: str, terms: list[str]) -> bool:
    text = caption.lower()
    return any(t.lower() in text for t in terms)


def feedback_block(feedback: str | None) -> str:
    if not feedback:
        return ""
    return f"Your previous answer was rejected for these reasons: {feedback}\nCorrect it in this answer."


def _draft(region: RegionSpec, box_index: int | None, features: str, budget: int) -> TaskDraft:
    return TaskDraft(
        tissue_box_index=box_index,
        x0=region.x0, y0=region.y0, x1=region.x1, y1=region.y1,
        magnification=region.magnification,
        features_to_document=features,
        budget=budget,
    )


def _promote(hypotheses: list[str], name: str) -> list[str]:
    return [name, *[h for h in hypotheses if h != name]]


# =========================================================================
# 脚本策略
# =========================================================================


class ScriptedSupervisorPolicy:
    """确定性监督者：先低倍浏览每个组织块，再沿倍率阶梯复查被标记的区域"""

    def __init__(self, config: Config) -> None:
        self.config = config

    @property
    def ladder(self) -> list[float]:
        c = self.config
        return [c.coarse_magnification, c.survey_magnification, c.detail_magnification]

    def next_magnification(self, magnification: float) -> float | None:
        return next((m for m in self.ladder if m > magnification + 1e-9), None)

    def relevance_of(self, roi: ROIRecord) -> float:
        if not roi.flagged_relevant:
            return 0.0
        mag = roi.region.magnification
        if mag >= self.config.detail_magnification:
            return 1.0
        if mag >= self.config.survey_magnification:
            return 0.5
        return 0.25

    _FEATURES = {
        "coarse": "overall tissue architecture and any architecturally atypical areas",
        "survey": "glandular and cellular organization within the atypical area",
        "detail": "nuclear and cytological detail of the atypical cells",
    }

    def _features_for(self, magnification: float) -> str:
        if magnification >= self.config.detail_magnification:
            return self._FEATURES["detail"]
        if magnification >= self.config.survey_magnification:
            return self._FEATURES["survey"]
        return self._FEATURES["coarse"]

    def initial(self, ctx: SupervisorContext, feedback: str | None = None) -> InitDecision:
        hypotheses = [LESION_PRESENT, BENIGN_ONLY]
        if not ctx.tissue_boxes:
            return InitDecision(
                hypotheses=hypotheses, plan="report no tissue", current_step="confirm absence of tissue",
                justification="tissue detection found no tissue on the slide", tasks=[],
            )
        mag = self.config.coarse_magnification
        base = ctx.slide.base_magnification
        tasks = [
            _draft(b.region(mag), b.index, self._features_for(mag), sweep_budget(b.region(mag), self.config, base))
            for b in ctx.tissue_boxes
        ]
        return InitDecision(
            hypotheses=hypotheses,
            plan="survey every tissue region at low power, then escalate magnification over atypical areas",
            current_step=f"low-power survey of {len(tasks)} tissue region(s)",
            justification="architecture is assessed first at low magnification",
            tasks=tasks,
        )

    def plan(self, state: SupervisorState, ctx: SupervisorContext, feedback: str | None = None) -> PlanDecision:
        queued = state.queued_tasks()
        if not queued:
            return PlanDecision(
                hypotheses=state.hypotheses, plan=state.plan, current_step="collate findings", tasks=[],
                justification="all queued examinations are complete", finished=True,
            )
        return PlanDecision(
            hypotheses=state.hypotheses, plan=state.plan,
            current_step=f"issue queued examinations ({len(queued)} pending)", tasks=[],
            justification=f"{len(queued)} examination(s) still queued", finished=False,
        )

    def _follow_ups(self, state: SupervisorState, ctx: SupervisorContext,
                    reports: list[ExplorerReport]) -> tuple[list[TaskDraft], list[str]]:
        by_id = {t.task_id: t for t in state.pending_tasks}
        drafts: list[TaskDraft] = []
        notes: list[str] = []
        for rep in reports:
            for roi in rep.rois:
                if not roi.flagged_relevant:
                    continue
                nxt = self.next_magnification(roi.region.magnification)
                if nxt is None:
                    continue
                region = RegionSpec(roi.region.x0, roi.region.y0, roi.region.x1, roi.region.y1, nxt)
                source = by_id.get(rep.task_id)
                box = source.tissue_box_index if source else None
                budget = sweep_budget(region, self.config, ctx.slide.base_magnification)
                drafts.append(_draft(region, box, self._features_for(nxt), budget))
                notes.append(f"{roi.roi_id} flagged at {roi.region.magnification:g}x: re-examine at {nxt:g}x")
        return drafts, notes

    def review(self, state: SupervisorState, ctx: SupervisorContext, reports: list[ExplorerReport],
               feedback: str | None = None) -> ReviewDecision:
        hypotheses = list(state.hypotheses)
        justifications: list[str] = []
        if not reports:
            return ReviewDecision(hypotheses=hypotheses, justifications=[], follow_up_tasks=[], relevance={})
        rois = [roi for rep in reports for roi in rep.rois]
        flagged = [r for r in rois if r.flagged_relevant]
        seen_before = any(r.flagged_relevant for r in state.all_rois())
        if flagged and hypotheses[0] != LESION_PRESENT and LESION_PRESENT in hypotheses:
            hypotheses = _promote(hypotheses, LESION_PRESENT)
            justifications.append(f"{len(flagged)} flagged region(s) support '{LESION_PRESENT}'")
        elif not flagged and not seen_before and hypotheses[0] != BENIGN_ONLY and BENIGN_ONLY in hypotheses:
            hypotheses = _promote(hypotheses, BENIGN_ONLY)
            justifications.append(f"no flagged regions so far support '{BENIGN_ONLY}'")
        drafts, notes = self._follow_ups(state, ctx, reports)
        justifications.extend(notes)
        return ReviewDecision(
            hypotheses=hypotheses,
            justifications=justifications,
            follow_up_tasks=drafts,
            relevance={r.roi_id: self.relevance_of(r) for r in rois},
        )

    def report(self, state: SupervisorState, ctx: SupervisorContext, rois: list[ROIRecord],
               diagnoses: list[str], feedback: str | None = None) -> ReportDecision:
        primary = diagnoses[0]
        lines = [f"Primary diagnosis: {primary}; differentials: {diagnoses[1]}; {diagnoses[2]}."]
        lines.extend(f"[{r.roi_id}] {r.region.magnification:g}x: {r.caption}" for r in rois)
        confident = any(
            r.region.magnification >= self.config.high_power and primary.lower() in r.caption.lower() for r in rois
        )
        return ReportDecision(
            narrative="\n".join(lines),
            confidence="High" if confident else "Low",
            cited_roi_ids=[r.roi_id for r in rois],
        )


class SingleAgentPolicy(ScriptedSupervisorPolicy):
    """单智能体对照：一个整张切片的扫描任务，无复查"""

    def initial(self, ctx: SupervisorContext, feedback: str | None = None) -> InitDecision:
        slide = ctx.slide
        region = RegionSpec(0, 0, slide.base_width, slide.base_height, self.config.single_agent_magnification)
        return InitDecision(
            hypotheses=[LESION_PRESENT, BENIGN_ONLY],
            plan="single explorer sweeps the whole slide",
            current_step="whole-slide sweep",
            justification="single-agent configuration",
            tasks=[_draft(region, None, self._features_for(region.magnification), self.config.single_agent_budget)],
        )

    def _follow_ups(self, state: SupervisorState, ctx: SupervisorContext,
                    reports: list[ExplorerReport]) -> tuple[list[TaskDraft], list[str]]:
        return [], []

    def relevance_of(self, roi: ROIRecord) -> float:
        return 1.0 if roi.flagged_relevant else 0.0


class SweepExplorerPolicy:
    """网格扫描探索者：按行优先访问任务区域的格子，描述命中关键词的格子作为关键视野"""

    def __init__(self, config: Config) -> None:
        self.config = config
        self._terms = flag_terms(config)

    def next_action(self, state: ExplorerState, slide: PyramidSlide, thumbnail: Callable[[], RasterImage],
                    feedback: str | None = None, sink: TraceSink | None = None) -> ExplorerDecision:
        cells = sweep_cells(state.task.region, self.config, slide.base_magnification)
        i = len(state.visited)
        if state.views_remaining > 0 and i < len(cells):
            c = cells[i]
            return ExplorerDecision(
                action="view", x0=c.x0, y0=c.y0, x1=c.x1, y1=c.y1, magnification=c.magnification,
                rationale=f"sweep cell {i + 1}/{len(cells)} at {c.magnification:g}x",
            )
        key = [j for j, (_, caption) in enumerate(state.captions) if is_flagged(caption, self._terms)]
        findings = "; ".join(f"view {j}: {state.captions[j][1]}" for j in key) or NO_FINDINGS
        return ExplorerDecision(action="submit", findings=findings, key_view_indices=key)


# =========================================================================
# 模型策略
# =========================================================================


def _box_lines(ctx: SupervisorContext) -> str:
    if not ctx.tissue_boxes:
        return "(none detected)"
    return "\n".join(f"box {b.index}: {b.x0} {b.y0} {b.x1} {b.y1}" for b in ctx.tissue_boxes)


def _task_lines(tasks: list[TaskSpec]) -> str:
    if not tasks:
        return "(none)"
    return "\n".join(
        f"{t.task_id}: ({t.region.x0},{t.region.y0},{t.region.x1},{t.region.y1}) at {t.magnification:g}x, "
        f"{t.features_to_document}"
        for t in tasks
    )


def _report_lines(reports: list[ExplorerReport]) -> str:
    if not reports:
        return "(none)"
    blocks = []
    for rep in reports:
        status = f"FAILED: {rep.error}" if rep.failed else rep.findings
        rois = "\n".join(
            f"  [{r.roi_id}] ({r.region.x0},{r.region.y0},{r.region.x1},{r.region.y1}) "
            f"{r.region.magnification:g}x{' flagged' if r.flagged_relevant else ''}: {r.caption}"
            for r in rep.rois
        )
        blocks.append(f"{rep.task_id} ({rep.views_used} views): {status}" + (f"\n{rois}" if rois else ""))
    return "\n".join(blocks)


class LLMSupervisorPolicy:
    """模型驱动的监督者"""

    def __init__(self, backend: ChatBackend, config: Config, retry: RetryPolicy, sink: TraceSink | None = None) -> None:
        self.backend = backend
        self.config = config
        self.retry = retry
        self.sink = sink

    def _slide_values(self, ctx: SupervisorContext) -> dict[str, object]:
        slide = ctx.slide
        return {
            "slide_id": slide.slide_id,
            "width": slide.base_width,
            "height": slide.base_height,
            "base_magnification": f"{slide.base_magnification:g}",
            "magnifications": ", ".join(f"{m:g}x" for m in slide.allowed_magnifications(self.config.magnifications)),
            "default_budget": self.config.default_budget,
        }

    def _ask(self, prompt: str, schema: type[D], images: tuple[RasterImage, ...] = ()) -> D:
        turns = [ChatTurn.user(prompt, images)]
        return decide(self.backend, turns, schema, retry=self.retry, sink=self.sink, actor="supervisor")

    def initial(self, ctx: SupervisorContext, feedback: str | None = None) -> InitDecision:
        prompt = render_prompt(
            "supervisor_init", **self._slide_values(ctx),
            tissue_boxes=_box_lines(ctx), context=ctx.clinical_context or "none", feedback=feedback_block(feedback),
        )
        return self._ask(prompt, InitDecision, (ctx.thumbnail(),))

    def plan(self, state: SupervisorState, ctx: SupervisorContext, feedback: str | None = None) -> PlanDecision:
        prompt = render_prompt(
            "supervisor_plan", **self._slide_values(ctx),
            round=state.round + 1, max_rounds=self.config.max_rounds,
            hypotheses="\n".join(f"{i + 1}. {h}" for i, h in enumerate(state.hypotheses)),
            plan=state.plan, queued=_task_lines(state.queued_tasks()),
            findings=_report_lines(state.received_reports), feedback=feedback_block(feedback),
        )
        return self._ask(prompt, PlanDecision, (ctx.thumbnail(),))

    def review(self, state: SupervisorState, ctx: SupervisorContext, reports: list[ExplorerReport],
               feedback: str | None = None) -> ReviewDecision:
        if not reports:
            return ReviewDecision(hypotheses=state.hypotheses, justifications=[])
        prompt = render_prompt(
            "supervisor_review", **self._slide_values(ctx),
            hypotheses="\n".join(f"{i + 1}. {h}" for i, h in enumerate(state.hypotheses)),
            reports=_report_lines(reports), feedback=feedback_block(feedback),
        )
        return self._ask(prompt, ReviewDecision)

    def report(self, state: SupervisorState, ctx: SupervisorContext, rois: list[ROIRecord],
               diagnoses: list[str], feedback: str | None = None) -> ReportDecision:
        listing = "\n".join(
            f"[{r.roi_id}] {r.region.magnification:g}x at ({r.region.x0},{r.region.y0}): {r.caption}" for r in rois
        )
        prompt = render_prompt(
            "supervisor_report", slide_id=ctx.slide.slide_id, context=ctx.clinical_context or "none",
            rois=listing, diagnoses="; ".join(diagnoses), feedback=feedback_block(feedback),
        )
        return self._ask(prompt, ReportDecision)


class LLMExplorerPolicy:
    """模型驱动的探索者；每一步都附带标注了已访问区域的缩略图"""

    def __init__(self, backend: ChatBackend, config: Config, retry: RetryPolicy) -> None:
        self.backend = backend
        self.config = config
        self.retry = retry

    def next_action(self, state: ExplorerState, slide: PyramidSlide, thumbnail: Callable[[], RasterImage],
                    feedback: str | None = None, sink: TraceSink | None = None) -> ExplorerDecision:
        task = state.task
        views = "\n".join(
            f"{i}. ({r.x0},{r.y0},{r.x1},{r.y1}) {r.magnification:g}x: {caption}"
            for i, (r, caption) in enumerate(state.captions)
        ) or "(none)"
        prompt = render_prompt(
            "explorer",
            task_id=task.task_id, features=task.features_to_document,
            x0=task.region.x0, y0=task.region.y0, x1=task.region.x1, y1=task.region.y1,
            magnification=f"{task.magnification:g}",
            magnifications=", ".join(f"{m:g}x" for m in slide.allowed_magnifications(self.config.magnifications)),
            context=task.context, views_remaining=state.views_remaining, views=views,
            feedback=feedback_block(feedback),
        )
        turns = [ChatTurn.user(prompt, [thumbnail()])]
        return decide(self.backend, turns, ExplorerDecision, retry=self.retry, sink=sink,
                      actor=explorer_actor(task.task_id))
