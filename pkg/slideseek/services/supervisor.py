"""监督者：假设、计划、下发任务、审阅报告、终止判断、汇总 ROI 与最终报告

监督者严格串行。所有状态变化都先构造成 init / plan / review 事件，经 trace.apply_event 折叠得到新状态，
再连同状态摘要写入 trace；回放使用同一个折叠函数，因此两者必然一致。

任务草稿校验失败时携带违例列表发起一次修复；修复后：
  - 仍有可下发的任务 -> 丢弃无效草稿继续
  - 提出了草稿但全部无效 -> PlanningError
  - 既无草稿也无排队任务 -> 以 "no further tasks" 结束
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from typing import Any

from slideseek.core.anyres import request_token_plan
from slideseek.core.config import Config
from slideseek.core.exceptions import DecisionError, PlanningError, ProtocolError, SlideSeekError
from slideseek.core.models import (
    Confidence,
    DiagnosisReport,
    EventKind,
    ExplorerReport,
    RegionSpec,
    ROIRecord,
    SupervisorState,
    TaskSpec,
    TraceEvent,
)
from slideseek.core.protocols import Captioner, SupervisorContext, SupervisorPolicy, TraceSink
from slideseek.core.schemas import ReportDecision, TaskDraft
from slideseek.core.slide_store import image_digest, read_region
from slideseek.core.trace import MAX_CITED_ROIS, apply_event, state_digest
from slideseek.core.validation import validate_task
from slideseek.prompts import PROMPT_VERSION

logger = logging.getLogger(__name__)

SUPERVISOR = "supervisor"
BUDGET_EXHAUSTED = "budget exhausted"
NO_FURTHER_TASKS = "no further tasks"
NON_DIAGNOSTIC = ["non-diagnostic", "insufficient tissue sampling", "no lesion identified"]

_CITATION = re.compile(r"\[([^\[\]\s]+)\]")


@dataclass(frozen=True)
class Finished:
    """plan_round 的终止结果"""

    justification: str


@dataclass
class _Planned:
    hypotheses: list[str]
    plan: str
    current_step: str
    justification: str
    finished: bool
    new_tasks: list[TaskSpec]
    dropped: list[str]
    next_seq: int


def cited_ids(narrative: str) -> list[str]:
    """叙述中 [roi_id] 形式的引用，按出现顺序去重"""
    return list(dict.fromkeys(_CITATION.findall(narrative)))


class Supervisor:
    """监督者循环（init -> (plan_round -> 派发 -> review_reports)* -> collate_rois -> finalize）"""

    def __init__(
        self,
        policy: SupervisorPolicy,
        ctx: SupervisorContext,
        config: Config,
        sink: TraceSink,
        captioner: Captioner,
    ) -> None:
        self.policy = policy
        self.ctx = ctx
        self.config = config
        self.sink = sink
        self.captioner = captioner
        self._state: SupervisorState | None = None

    @property
    def state(self) -> SupervisorState:
        if self._state is None:
            raise ProtocolError("监督者尚未初始化")
        return self._state

    # ---- 内部工具 ----

    def _commit(self, kind: EventKind, payload: dict[str, Any]) -> SupervisorState:
        provisional = TraceEvent(seq=-1, wall_time=0.0, actor=SUPERVISOR, kind=kind, payload=payload)
        new_state = apply_event(self._state, provisional)
        if new_state is None:
            raise ProtocolError(f"{kind.value} 事件无法折叠")
        payload["state_digest"] = state_digest(new_state)
        self.sink.emit(SUPERVISOR, kind, payload)
        self._state = new_state
        return new_state

    def _repair(self, stage: str, problems: list[str]) -> str:
        logger.info("监督者决策需要修复 (%s): %s", stage, problems)
        self.sink.emit(SUPERVISOR, EventKind.REPAIR, {"stage": stage, "problems": list(problems)})
        return "; ".join(problems)

    def _materialize(self, drafts: list[TaskDraft], hypotheses: list[str],
                     seq: int) -> tuple[list[TaskSpec], list[str], int]:
        """草稿 -> 已校验任务；只为通过校验的任务分配 id"""
        slide = self.ctx.slide
        allowed = slide.allowed_magnifications(self.config.magnifications)
        boxes = {b.index for b in self.ctx.tissue_boxes}
        tasks: list[TaskSpec] = []
        problems: list[str] = []
        for i, d in enumerate(drafts):
            budget = self.config.default_budget if d.budget is None else d.budget
            task = TaskSpec(
                task_id=f"t{seq:03d}",
                tissue_box_index=d.tissue_box_index,
                region=RegionSpec(d.x0, d.y0, d.x1, d.y1, d.magnification),
                features_to_document=d.features_to_document,
                context="; ".join(hypotheses),
                budget=min(budget, self.config.max_task_budget),
            )
            issues = validate_task(task, slide, allowed=allowed, blocklist=self.config.modality_blocklist)
            if d.tissue_box_index is not None and d.tissue_box_index not in boxes:
                issues.append(f"unknown tissue box: {d.tissue_box_index}")
            if issues:
                problems.extend(f"task draft {i}: {p}" for p in issues)
                continue
            tasks.append(task)
            seq += 1
        return tasks, problems, seq

    # ---- 初始化 ----

    def init(self) -> SupervisorState:
        """形成初始假设与计划；草稿校验失败时修复一次

        Raises:
            PlanningError: 修复后草稿仍全部无效
        """
        if self._state is not None:
            raise ProtocolError("监督者已初始化")
        decision = self.policy.initial(self.ctx)
        tasks, problems, seq = self._materialize(decision.tasks, decision.hypotheses, 0)
        if problems:
            decision = self.policy.initial(self.ctx, feedback=self._repair("init", problems))
            tasks, problems, seq = self._materialize(decision.tasks, decision.hypotheses, 0)
            if problems and not tasks:
                raise PlanningError(f"初始任务全部无效: {problems[0]}")
        state = self._commit(EventKind.INIT, {
            "slide_id": self.ctx.slide.slide_id,
            "slide": self.ctx.slide.describe(),
            "tissue_boxes": [b.to_dict() for b in self.ctx.tissue_boxes],
            "context": self.ctx.clinical_context,
            "hypotheses": list(decision.hypotheses),
            "plan": decision.plan,
            "current_step": decision.current_step,
            "justification": decision.justification,
            "tasks": [t.to_dict() for t in tasks],
            "dropped": problems,
            "next_task_seq": seq,
            "prompt_version": PROMPT_VERSION,
            "config": self.config.to_dict(),
        })
        logger.info("监督者初始化: %s, %d 个假设, %d 个排队任务", state.slide_id, len(state.hypotheses),
                    len(state.pending_tasks))
        return state

    # ---- 规划 ----

    def _decide_plan(self, state: SupervisorState) -> _Planned:
        if state.round >= self.config.max_rounds:
            return _Planned(state.hypotheses, state.plan, "collate findings", BUDGET_EXHAUSTED, True, [], [],
                            state.next_task_seq)
        feedback: str | None = None
        for attempt in range(2):
            d = self.policy.plan(state, self.ctx, feedback)
            if d.finished:
                return _Planned(d.hypotheses, d.plan, d.current_step, d.justification, True, [], [],
                                state.next_task_seq)
            tasks, problems, seq = self._materialize(d.tasks, d.hypotheses, state.next_task_seq)
            issuable = bool(tasks or state.queued_tasks())
            if issuable and (not problems or attempt == 1):
                return _Planned(d.hypotheses, d.plan, d.current_step, d.justification, False, tasks, problems, seq)
            if not issuable and not problems:
                problems = ["no tasks proposed and none queued: propose tasks or set finished"]
            if attempt == 0:
                feedback = self._repair("plan", problems)
                continue
            if d.tasks:
                raise PlanningError(f"第 {state.round + 1} 轮提出的任务全部无效: {problems[0]}")
            return _Planned(d.hypotheses, d.plan, "collate findings", NO_FURTHER_TASKS, True, [], problems,
                            state.next_task_seq)
        raise AssertionError("unreachable")

    def plan_round(self) -> list[TaskSpec] | Finished:
        """规划一轮并下发至多 max_tasks_per_round 个任务，或返回 Finished"""
        state = self.state
        if state.finished:
            raise ProtocolError("监督者已结束，不能继续规划")
        p = self._decide_plan(state)
        queued = [*state.queued_tasks(), *p.new_tasks]
        issued = [] if p.finished else queued[:self.config.max_tasks_per_round]
        new_state = self._commit(EventKind.PLAN, {
            "round": state.round + 1,
            "hypotheses": list(p.hypotheses),
            "plan": p.plan,
            "current_step": p.current_step,
            "justification": p.justification,
            "finished": p.finished,
            "new_tasks": [t.to_dict() for t in p.new_tasks],
            "issued": [t.task_id for t in issued],
            "dropped": p.dropped,
            "next_task_seq": p.next_seq,
        })
        if p.finished:
            logger.info("第 %d 轮: 结束 (%s)", new_state.round, p.justification)
            return Finished(p.justification)
        tasks = new_state.issued_tasks()
        for t in tasks:
            self.sink.emit(SUPERVISOR, EventKind.TASK_ISSUED, {"task": t.to_dict()})
        logger.info("第 %d 轮: 下发 %d 个任务，%d 个仍在排队", new_state.round, len(tasks),
                    len(new_state.queued_tasks()), extra={"round": new_state.round})
        return tasks

    # ---- 审阅 ----

    def record_failure(self, task: TaskSpec, error: SlideSeekError) -> ExplorerReport:
        """为失败的任务写入失败报告"""
        report = ExplorerReport(
            task_id=task.task_id, findings=f"task failed: {error}", rois=[], views_used=0,
            failed=True, error=f"{error.code}: {error}",
        )
        self.sink.emit(SUPERVISOR, EventKind.REPORT, report.to_dict())
        return report

    def review_reports(self, reports: list[ExplorerReport]) -> SupervisorState:
        """审阅本轮报告，更新假设并排队复查任务

        Raises:
            ProtocolError: 报告对应未下发的任务或重复报告
        """
        state = self.state
        issued = {t.task_id for t in state.issued_tasks()}
        seen: set[str] = set()
        for rep in reports:
            if rep.task_id in seen:
                raise ProtocolError(f"duplicate report for task {rep.task_id}")
            if rep.task_id not in issued:
                raise ProtocolError(f"report for unknown task {rep.task_id}")
            seen.add(rep.task_id)

        d = self.policy.review(state, self.ctx, reports)
        follow_ups: list[TaskSpec] = []
        dropped: list[str] = []
        seq = state.next_task_seq
        if not state.finished:
            follow_ups, dropped, seq = self._materialize(d.follow_up_tasks, d.hypotheses, seq)
            if dropped:
                d = self.policy.review(state, self.ctx, reports, self._repair("review", dropped))
                follow_ups, dropped, seq = self._materialize(d.follow_up_tasks, d.hypotheses, state.next_task_seq)
        roi_ids = {roi.roi_id for rep in reports for roi in rep.rois}
        new_state = self._commit(EventKind.REVIEW, {
            "round": state.round,
            "hypotheses": list(d.hypotheses),
            "justifications": list(d.justifications),
            "reports": [r.to_dict() for r in reports],
            "follow_ups": [t.to_dict() for t in follow_ups],
            "relevance": {k: float(v) for k, v in sorted(d.relevance.items()) if k in roi_ids},
            "dropped": dropped,
            "next_task_seq": seq,
        })
        logger.info("第 %d 轮审阅: %d 份报告, %d 个复查任务, 首要假设=%s", state.round, len(reports),
                    len(follow_ups), new_state.hypotheses[0], extra={"round": state.round})
        return new_state

    # ---- 汇总与报告 ----

    def collate_rois(self) -> list[ROIRecord]:
        """按相关度降序、轮次升序、roi_id 升序选取至多 max_rois 个已标记 ROI"""
        state = self.state
        if not state.finished:
            raise ProtocolError("探索尚未结束，不能汇总 ROI")
        flagged = [r for r in state.all_rois() if r.flagged_relevant]
        scored = [replace(r, relevance=state.roi_relevance.get(r.roi_id, r.score)) for r in flagged]
        scored.sort(key=lambda r: (-r.score, r.round, r.roi_id))
        selected = scored[:min(self.config.max_rois, MAX_CITED_ROIS)]
        self.sink.emit(SUPERVISOR, EventKind.COLLATE, {
            "roi_ids": [r.roi_id for r in selected],
            "candidates": len(flagged),
        })
        return selected

    def _report_problems(self, decision: ReportDecision, rois: list[ROIRecord]) -> list[str]:
        known = {r.roi_id for r in rois}
        listed = set(decision.cited_roi_ids)
        problems = [f"cited_roi_ids contains unknown ROI {rid}" for rid in decision.cited_roi_ids if rid not in known]
        problems.extend(
            f"narrative cites [{rid}] which is not in cited_roi_ids"
            for rid in cited_ids(decision.narrative) if rid not in listed
        )
        return problems

    def _draft_report(self, state: SupervisorState, rois: list[ROIRecord], diagnoses: list[str]) -> ReportDecision:
        decision = self.policy.report(state, self.ctx, rois, diagnoses)
        problems = self._report_problems(decision, rois)
        if not problems:
            return decision
        decision = self.policy.report(state, self.ctx, rois, diagnoses, self._repair("report", problems))
        problems = self._report_problems(decision, rois)
        if problems:
            raise DecisionError(f"报告引用无效: {problems[0]}")
        return decision

    def finalize(self, rois: list[ROIRecord]) -> DiagnosisReport:
        """获取鉴别诊断并起草报告；无 ROI 时给出 non-diagnostic 报告

        Raises:
            DecisionError: 鉴别诊断不是 3 项，或报告引用修复后仍无效
            BackendError: 描述器重试耗尽
        """
        state = self.state
        views = sum(r.views_used for r in state.received_reports)
        if not rois:
            diagnoses = list(NON_DIAGNOSTIC)
            self.sink.emit(SUPERVISOR, EventKind.DIAGNOSE, {
                "roi_ids": [], "diagnoses": diagnoses, "token_plan": request_token_plan([]),
            })
            report = DiagnosisReport(
                slide_id=state.slide_id,
                primary_diagnosis=diagnoses[0],
                differentials=diagnoses[1:],
                confidence=Confidence.LOW,
                narrative="No diagnostically relevant regions were identified; sampling is insufficient for a "
                          "diagnosis.",
                cited_rois=[],
                rounds=state.round,
                views=views,
            )
        else:
            images = [read_region(self.ctx.slide, r.region, self.config.max_edge) for r in rois]
            diagnoses = self.captioner.differential(rois, images, self.ctx.clinical_context)
            if len(diagnoses) != 3:
                raise DecisionError(f"鉴别诊断必须恰好 3 项，实际 {len(diagnoses)}")
            self.sink.emit(SUPERVISOR, EventKind.DIAGNOSE, {
                "roi_ids": [r.roi_id for r in rois],
                "diagnoses": diagnoses,
                "token_plan": request_token_plan([(im.shape[1], im.shape[0]) for im in images]),
                "image_digests": [image_digest(im) for im in images],
            })
            decision = self._draft_report(state, rois, diagnoses)
            cited = set(decision.cited_roi_ids) | set(cited_ids(decision.narrative))
            report = DiagnosisReport(
                slide_id=state.slide_id,
                primary_diagnosis=diagnoses[0],
                differentials=diagnoses[1:],
                confidence=Confidence(decision.confidence),
                narrative=decision.narrative,
                cited_rois=[r for r in rois if r.roi_id in cited],
                rounds=state.round,
                views=views,
            )
        self.sink.emit(SUPERVISOR, EventKind.FINALIZE, {"status": "completed", "report": report.to_dict()})
        logger.info("诊断完成: %s -> %s (%s)", report.slide_id, report.primary_diagnosis, report.confidence.value,
                    extra={"slide_id": report.slide_id})
        return report

    def abort(self, error: SlideSeekError) -> None:
        self.sink.emit(SUPERVISOR, EventKind.FINALIZE, {
            "status": "aborted", "error_code": error.code, "error": str(error),
        })
        logger.error("探索中止: %s", error, extra={"slide_id": self.ctx.slide.slide_id})
