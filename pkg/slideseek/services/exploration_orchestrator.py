"""探索编排器：6 步流水线（Step 模式）

将一次切片探索拆解为独立的 Step 类:

  1. DetectTissueStep   ：打开切片并检测组织包围盒
  2. InitSupervisorStep ：构造描述器与策略，监督者形成初始假设
  3. ExploreLoopStep    ：按轮循环，规划 -> 并行探索 -> 屏障 -> 审阅
  4. CollateStep        ：汇总关键 ROI
  5. FinalizeStep       ：鉴别诊断与最终报告
  6. WriteArtifactsStep ：report.md / report.json / thumbnail.png / outcome.jsonl

trace 在流水线开始前打开，通过 try/finally 保证关闭。
后端重试耗尽、决策修复失败或规划失败时写入 aborted 的 finalize 事件后重新抛出。
"""

from __future__ import annotations

import abc
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from slideseek.core.exceptions import BackendError, InternalError, ProtocolError, SlideSeekError
from slideseek.core.models import (
    DiagnosisReport,
    EventKind,
    ExplorerReport,
    OutcomeRecord,
    PyramidSlide,
    RasterImage,
    RegionSpec,
    ROIRecord,
    TaskSpec,
    TissueBox,
)
from slideseek.core.protocols import SupervisorContext
from slideseek.core.reporter import write_reports
from slideseek.core.slide_store import TRUTH_NAME, encode_png, open_slide, render_thumbnail
from slideseek.core.stats import MAG_CLASSES, count_views
from slideseek.core.synthetic import load_truth, slide_label
from slideseek.core.tissue import detect_tissue
from slideseek.core.trace import TraceAppender, TraceBuffer, logical_clock
from slideseek.services.container import ServiceContainer
from slideseek.services.explorer import Explorer
from slideseek.services.supervisor import SUPERVISOR, Finished, Supervisor
from slideseek.utils.fileio import atomic_write, atomic_write_bytes

logger = logging.getLogger(__name__)

TRACE_NAME = "trace.jsonl"
THUMBNAIL_NAME = "thumbnail.png"
OUTCOME_NAME = "outcome.jsonl"


@dataclass
class ExplorationPlan:
    """一次探索的输入"""

    slide_path: str
    out_dir: str
    context: str = ""


@dataclass
class ExplorationContext:
    """步骤之间传递的运行期对象"""

    trace: TraceAppender
    slide: PyramidSlide | None = None
    tissue_boxes: list[TissueBox] = field(default_factory=list)
    supervisor: Supervisor | None = None
    rois: list[ROIRecord] = field(default_factory=list)

    def visited(self) -> list[RegionSpec]:
        """trace 中已查看的全部区域（按提交顺序）"""
        return [RegionSpec.from_dict(ev.payload["region"]) for ev in self.trace.events if ev.kind is EventKind.VIEW]

    def require_slide(self) -> PyramidSlide:
        if self.slide is None:
            raise ProtocolError("切片尚未打开")
        return self.slide

    def require_supervisor(self) -> Supervisor:
        if self.supervisor is None:
            raise ProtocolError("监督者尚未初始化")
        return self.supervisor


@dataclass
class ExplorationReport:
    """编排执行报告"""

    plan: ExplorationPlan
    steps: list[dict[str, Any]] = field(default_factory=list)
    report: DiagnosisReport | None = None
    artifacts: list[str] = field(default_factory=list)
    status: str = "pending"
    error: str = ""

    @property
    def success(self) -> bool:
        return self.status == "completed" and self.report is not None


# =========================================================================
# Step 抽象基类
# =========================================================================


class OrchestratorStep(abc.ABC):
    """编排步骤基类：每个阶段实现 execute 方法"""

    name: str = ""

    def __init__(self, container: ServiceContainer) -> None:
        self.c = container

    @abc.abstractmethod
    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        """执行本步骤"""


# =========================================================================
# 各步骤实现
# =========================================================================


class DetectTissueStep(OrchestratorStep):
    """步骤1: 打开切片并检测组织"""

    name = "detect_tissue"

    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        ctx.slide = open_slide(plan.slide_path)
        ctx.tissue_boxes = detect_tissue(ctx.slide)
        report.steps.append({
            "step": self.name, "status": "done",
            "slide_id": ctx.slide.slide_id, "tissue_boxes": len(ctx.tissue_boxes),
        })
        logger.info("[Step 1] 切片已打开: %s, %d 个组织区域", ctx.slide.slide_id, len(ctx.tissue_boxes))


class InitSupervisorStep(OrchestratorStep):
    """步骤2: 装配监督者并初始化"""

    name = "init_supervisor"

    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        slide = ctx.require_slide()
        cfg = self.c.config

        def _thumbnail() -> RasterImage:
            return render_thumbnail(slide, ctx.visited(), cfg.thumbnail_edge,
                                    high_power=cfg.high_power, medium_power=cfg.medium_power)

        sup_ctx = SupervisorContext(slide=slide, tissue_boxes=ctx.tissue_boxes,
                                    clinical_context=plan.context, thumbnail=_thumbnail)
        ctx.supervisor = Supervisor(
            policy=self.c.make_supervisor_policy(ctx.trace),
            ctx=sup_ctx,
            config=cfg,
            sink=ctx.trace,
            captioner=self.c.make_captioner(plan.slide_path, ctx.trace),
        )
        state = ctx.supervisor.init()
        report.steps.append({
            "step": self.name, "status": "done",
            "hypotheses": list(state.hypotheses), "queued": len(state.pending_tasks),
        })
        logger.info("[Step 2] 监督者初始化完成: %d 个排队任务", len(state.pending_tasks))


class ExploreLoopStep(OrchestratorStep):
    """步骤3: 轮次循环，探索者事件在屏障后按任务顺序提交"""

    name = "explore"

    def _run_round(self, sup: Supervisor, explorer: Explorer, ctx: ExplorationContext,
                   tasks: list[TaskSpec]) -> list[ExplorerReport]:
        buffers = {t.task_id: TraceBuffer() for t in tasks}
        outcomes = self.c.scheduler.run_round(tasks, lambda t: explorer.run_task(t, buffers[t.task_id]))
        reports: list[ExplorerReport] = []
        backend_error: BackendError | None = None
        for outcome in outcomes:
            buffers[outcome.task.task_id].flush_to(ctx.trace)
            if outcome.ok and outcome.value is not None:
                reports.append(outcome.value)
                continue
            assert outcome.error is not None
            reports.append(sup.record_failure(outcome.task, outcome.error))
            if isinstance(outcome.error, BackendError) and backend_error is None:
                backend_error = outcome.error
        if backend_error is not None:
            raise backend_error
        return reports

    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        sup = ctx.require_supervisor()
        explorer = Explorer(
            slide=ctx.require_slide(),
            captioner=sup.captioner,
            policy=self.c.make_explorer_policy(),
            config=self.c.config,
        )
        issued = 0
        while True:
            outcome = sup.plan_round()
            if isinstance(outcome, Finished):
                sup.review_reports([])
                break
            issued += len(outcome)
            sup.review_reports(self._run_round(sup, explorer, ctx, outcome))
        state = sup.state
        report.steps.append({
            "step": self.name, "status": "done",
            "rounds": state.round, "tasks": issued, "reports": len(state.received_reports),
        })
        logger.info("[Step 3] 探索结束: %d 轮, %d 个任务", state.round, issued)


class CollateStep(OrchestratorStep):
    """步骤4: 汇总关键 ROI"""

    name = "collate"

    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        ctx.rois = ctx.require_supervisor().collate_rois()
        report.steps.append({"step": self.name, "status": "done", "rois": [r.roi_id for r in ctx.rois]})
        logger.info("[Step 4] 汇总 ROI: %d 个", len(ctx.rois))


class FinalizeStep(OrchestratorStep):
    """步骤5: 鉴别诊断并起草报告"""

    name = "finalize"

    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        report.report = ctx.require_supervisor().finalize(ctx.rois)
        report.steps.append({
            "step": self.name, "status": "done",
            "primary": report.report.primary_diagnosis, "confidence": report.report.confidence.value,
        })
        logger.info("[Step 5] 报告完成: %s", report.report.primary_diagnosis)


class WriteArtifactsStep(OrchestratorStep):
    """步骤6: 写出报告、缩略图与评估记录"""

    name = "write_artifacts"

    def _outcome(self, plan: ExplorationPlan, ctx: ExplorationContext, diagnosis: DiagnosisReport) -> str | None:
        if not (Path(plan.slide_path) / TRUTH_NAME).is_file():
            return None
        gold = slide_label(load_truth(plan.slide_path))
        if gold is None:
            return None
        cfg = self.c.config
        counts = count_views(ctx.trace.events, high_power=cfg.high_power, medium_power=cfg.medium_power)
        record = OutcomeRecord(
            case_id=diagnosis.slide_id,
            gold=gold,
            predictions=[diagnosis.primary_diagnosis, *diagnosis.differentials],
            confidence=diagnosis.confidence,
            regions_by_mag={c: counts[c] for c in MAG_CLASSES},
        )
        return json.dumps(record.to_dict(), ensure_ascii=False) + "\n"

    def execute(self, plan: ExplorationPlan, ctx: ExplorationContext, report: ExplorationReport) -> None:
        if report.report is None:
            report.steps.append({"step": self.name, "status": "skipped"})
            return
        cfg = self.c.config
        out = Path(plan.out_dir)
        paths = write_reports(report.report, out)
        thumb = render_thumbnail(ctx.require_slide(), ctx.visited(), cfg.thumbnail_edge,
                                 high_power=cfg.high_power, medium_power=cfg.medium_power)
        atomic_write_bytes(out / THUMBNAIL_NAME, encode_png(thumb))
        paths.append(out / THUMBNAIL_NAME)
        outcome = self._outcome(plan, ctx, report.report)
        if outcome is not None:
            atomic_write(out / OUTCOME_NAME, outcome)
            paths.append(out / OUTCOME_NAME)
        report.artifacts.extend(str(p) for p in paths)
        report.steps.append({"step": self.name, "status": "done", "artifacts": [p.name for p in paths]})
        logger.info("[Step 6] 产物已写出: %s", ", ".join(p.name for p in paths))


# =========================================================================
# 编排器
# =========================================================================


class ExplorationOrchestrator:
    """6 步探索编排器（Step 组合，try/finally 保证 trace 关闭）"""

    def __init__(self, container: ServiceContainer | None = None) -> None:
        self.c = container or ServiceContainer()
        self.pipeline: list[OrchestratorStep] = [
            DetectTissueStep(self.c),
            InitSupervisorStep(self.c),
            ExploreLoopStep(self.c),
            CollateStep(self.c),
            FinalizeStep(self.c),
            WriteArtifactsStep(self.c),
        ]

    def run(self, plan: ExplorationPlan) -> ExplorationReport:
        """执行一次完整探索

        Raises:
            SlideSeekError: 探索中止（trace 中已记录 aborted）；其他异常同样记录后原样抛出
        """
        clock = logical_clock() if self.c.config.clock == "logical" else None
        trace = TraceAppender(Path(plan.out_dir) / TRACE_NAME, clock=clock)
        ctx = ExplorationContext(trace=trace)
        report = ExplorationReport(plan=plan)
        try:
            for step in self.pipeline:
                step.execute(plan, ctx, report)
            report.status = "completed"
        except Exception as e:
            report.status = "aborted"
            report.error = str(e)
            self._record_abort(ctx, e)
            raise
        finally:
            trace.close()
        return report

    @staticmethod
    def _record_abort(ctx: ExplorationContext, error: Exception) -> None:
        """写入 finalize(aborted)；已有 finalize 事件时不再追加"""
        if any(ev.kind is EventKind.FINALIZE for ev in ctx.trace.events):
            logger.error("结束后失败: %s", error)
            return
        wrapped = error if isinstance(error, SlideSeekError) else InternalError.wrap(error)
        if ctx.supervisor is not None:
            ctx.supervisor.abort(wrapped)
        else:
            ctx.trace.emit(SUPERVISOR, EventKind.FINALIZE, {
                "status": "aborted", "error_code": wrapped.code, "error": str(wrapped),
            })
