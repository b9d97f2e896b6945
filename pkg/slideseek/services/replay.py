"""Trace 回放校验

  1. 结构检查（seq 连续、plan/review 交替、每个任务恰有一份报告 ...）
  2. 按状态事件折叠并逐步比对状态摘要
  3. 按记录的区域与倍率重新读取每个视野，比对像素摘要
  4. 记录的后端为 mock 时，在临时目录重跑整次探索，比对 report.json（逻辑时钟下还比对 trace 字节）

真实后端不可复现，只做 1-3。
"""

from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from slideseek.core.config import Config
from slideseek.core.exceptions import ReplayMismatchError
from slideseek.core.models import EventKind, RegionSpec, TraceEvent
from slideseek.core.slide_store import image_digest, open_slide, read_region
from slideseek.core.trace import check_trace, fold_states, read_trace

logger = logging.getLogger(__name__)


@dataclass
class ReplayResult:
    """回放结果摘要"""

    events: int
    states: int
    views_checked: int
    rerun: bool = False
    compared: list[str] = field(default_factory=list)


def _init_event(events: list[TraceEvent]) -> TraceEvent:
    for ev in events:
        if ev.kind is EventKind.INIT:
            return ev
    raise ReplayMismatchError("trace 中没有 init 事件")


def _completed(events: list[TraceEvent]) -> bool:
    return any(ev.kind is EventKind.FINALIZE and ev.payload.get("status") == "completed" for ev in events)


def verify_views(events: list[TraceEvent], slide_path: str | Path, max_edge: int) -> int:
    """重新读取每个 view 事件的区域并比对像素摘要，返回比对的视野数"""
    slide = open_slide(slide_path)
    init = _init_event(events)
    if init.payload["slide_id"] != slide.slide_id:
        raise ReplayMismatchError(f"切片不一致: trace 记录 {init.payload['slide_id']}，实际 {slide.slide_id}")
    mismatches: list[str] = []
    views = [ev for ev in events if ev.kind is EventKind.VIEW]
    for ev in views:
        image = read_region(slide, RegionSpec.from_dict(ev.payload["region"]), max_edge)
        if image_digest(image) != ev.payload["image_digest"]:
            mismatches.append(f"seq {ev.seq}: 视野像素不一致 ({ev.payload['task_id']} #{ev.payload['index']})")
    if mismatches:
        raise ReplayMismatchError(f"{len(mismatches)} 个视野重新读取后不一致", mismatches)
    return len(views)


def _rerun(trace_path: Path, slide_path: str | Path, report_path: Path, config: Config, context: str) -> list[str]:
    from slideseek.services.container import ServiceContainer
    from slideseek.services.exploration_orchestrator import (
        TRACE_NAME,
        ExplorationOrchestrator,
        ExplorationPlan,
    )

    compared: list[str] = []
    mismatches: list[str] = []
    with tempfile.TemporaryDirectory(prefix="slideseek-replay-") as tmp:
        plan = ExplorationPlan(slide_path=str(slide_path), out_dir=tmp, context=context)
        ExplorationOrchestrator(ServiceContainer(config=config)).run(plan)
        fresh = Path(tmp)
        if report_path.is_file():
            compared.append(report_path.name)
            if report_path.read_bytes() != (fresh / "report.json").read_bytes():
                mismatches.append("report.json 与重跑结果不一致")
        if config.clock == "logical":
            compared.append(trace_path.name)
            if trace_path.read_bytes() != (fresh / TRACE_NAME).read_bytes():
                mismatches.append("trace 与重跑结果不一致")
    if mismatches:
        raise ReplayMismatchError("重跑结果与记录不一致", mismatches)
    return compared


def replay_trace(
    trace_path: str | Path,
    slide_path: str | Path,
    *,
    report_path: str | Path | None = None,
) -> ReplayResult:
    """回放并校验一次探索

    Raises:
        TraceError: trace 行无法解析
        ReplayMismatchError: 结构违例、状态摘要、视野像素或重跑产物不一致
    """
    trace_path = Path(trace_path)
    events = read_trace(trace_path)
    problems = check_trace(events)
    if problems:
        raise ReplayMismatchError(f"trace 结构检查失败: {problems[0]}", problems)
    states = fold_states(events, verify=True)
    init = _init_event(events)
    config = Config.from_dict(init.payload["config"], source=f"{trace_path} init")
    views = verify_views(events, slide_path, config.max_edge)
    result = ReplayResult(events=len(events), states=len(states), views_checked=views)
    if config.backend == "mock" and _completed(events):
        report = Path(report_path) if report_path else trace_path.parent / "report.json"
        result.compared = _rerun(trace_path, slide_path, report, config, str(init.payload["context"]))
        result.rerun = True
    logger.info("回放通过: %d 个事件, %d 个状态, %d 个视野", result.events, result.states, result.views_checked)
    return result
