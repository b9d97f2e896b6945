"""Trace：只追加的事件日志

每行一个 JSON 事件，键顺序固定为 seq / wall_time / actor / kind / payload。
所有事件经同一个 TraceAppender 串行分配 seq（从 0 起无空洞）；
探索者在并行执行期间写入各自的 TraceBuffer，轮次屏障后按任务顺序提交。

监督者状态只通过 apply_event 演进，实时运行与回放共用同一个折叠函数，
init / plan / review 事件携带结果状态的摘要，用于回放时逐步比对。
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import threading
import time
from collections.abc import Callable
from pathlib import Path
from typing import IO, Any

from slideseek.core.exceptions import ReplayMismatchError, TraceError
from slideseek.core.models import (
    EventKind,
    ExplorerReport,
    SupervisorState,
    TaskSpec,
    TissueBox,
    TraceEvent,
)

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("seq", "wall_time", "actor", "kind", "payload")
STATE_EVENTS = (EventKind.INIT, EventKind.PLAN, EventKind.REVIEW)
MAX_CITED_ROIS = 10


# =========================================================================
# 编解码
# =========================================================================


def encode_event(event: TraceEvent) -> str:
    record = {
        "seq": event.seq,
        "wall_time": event.wall_time,
        "actor": event.actor,
        "kind": event.kind.value,
        "payload": event.payload,
    }
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def decode_event(line: str, line_no: int = 0) -> TraceEvent:
    """解析一行 trace；缺字段不做默认填充

    Raises:
        TraceError: JSON 无效、缺少必填字段、类型不符或 unknown event kind
    """
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise TraceError(f"malformed line: {e}", line_no) from e
    if not isinstance(record, dict):
        raise TraceError("malformed line: 不是 JSON 对象", line_no)
    missing = [k for k in REQUIRED_FIELDS if k not in record]
    if missing:
        raise TraceError(f"missing required field(s): {missing}", line_no)
    try:
        kind = EventKind(record["kind"])
    except ValueError as e:
        raise TraceError(f"unknown event kind: {record['kind']!r}", line_no) from e
    seq, wall = record["seq"], record["wall_time"]
    if isinstance(seq, bool) or not isinstance(seq, int):
        raise TraceError(f"seq 必须是整数: {seq!r}", line_no)
    if isinstance(wall, bool) or not isinstance(wall, (int, float)):
        raise TraceError(f"wall_time 必须是数值: {wall!r}", line_no)
    if not isinstance(record["actor"], str) or not isinstance(record["payload"], dict):
        raise TraceError("actor 必须是字符串且 payload 必须是对象", line_no)
    return TraceEvent(seq=seq, wall_time=float(wall), actor=record["actor"], kind=kind, payload=record["payload"])


def read_trace(path: str | Path) -> list[TraceEvent]:
    events: list[TraceEvent] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if line.strip():
                events.append(decode_event(line, line_no))
    return events


# =========================================================================
# 接收端
# =========================================================================


def logical_clock() -> Callable[[], float]:
    """逻辑时钟：依次返回 0.0, 1.0, 2.0 ...（在 appender 锁内调用，因此等于 seq）"""
    counter = itertools.count()
    return lambda: float(next(counter))


class TraceAppender:
    """线程安全的 trace 追加器，分配无空洞 seq"""

    def __init__(self, path: str | Path | None = None, clock: Callable[[], float] | None = None) -> None:
        self.path = Path(path) if path else None
        self._clock = clock or time.time
        self._lock = threading.Lock()
        self._next_seq = 0
        self._events: list[TraceEvent] = []
        self._fh: IO[str] | None = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")  # noqa: SIM115

    def emit(self, actor: str, kind: EventKind, payload: dict[str, Any]) -> TraceEvent:
        with self._lock:
            event = TraceEvent(seq=self._next_seq, wall_time=self._clock(), actor=actor, kind=kind, payload=payload)
            if self._fh:
                self._fh.write(encode_event(event) + "\n")
                self._fh.flush()
            self._events.append(event)
            self._next_seq += 1
            return event

    @property
    def events(self) -> list[TraceEvent]:
        with self._lock:
            return list(self._events)

    def close(self) -> None:
        with self._lock:
            if self._fh:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> TraceAppender:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


class TraceBuffer:
    """探索者本地暂存，flush_to 时按记录顺序提交"""

    def __init__(self) -> None:
        self._pending: list[tuple[str, EventKind, dict[str, Any]]] = []

    def emit(self, actor: str, kind: EventKind, payload: dict[str, Any]) -> None:
        self._pending.append((actor, kind, payload))

    def __len__(self) -> int:
        return len(self._pending)

    def flush_to(self, sink: TraceAppender) -> None:
        for actor, kind, payload in self._pending:
            sink.emit(actor, kind, payload)
        self._pending.clear()


# =========================================================================
# 状态折叠
# =========================================================================


def state_digest(state: SupervisorState) -> str:
    canonical = json.dumps(state.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _apply_init(p: dict[str, Any]) -> SupervisorState:
    return SupervisorState(
        slide_id=p["slide_id"],
        hypotheses=list(p["hypotheses"]),
        plan=p["plan"],
        current_step=p["current_step"],
        pending_tasks=[TaskSpec.from_dict(t) for t in p["tasks"]],
        justifications=[p["justification"]],
        next_task_seq=int(p["next_task_seq"]),
        tissue_boxes=[TissueBox.from_dict(b) for b in p["tissue_boxes"]],
    )


def _apply_plan(state: SupervisorState, p: dict[str, Any]) -> SupervisorState:
    s = state.copy()
    s.round = int(p["round"])
    s.hypotheses = list(p["hypotheses"])
    s.plan = p["plan"]
    s.current_step = p["current_step"]
    s.justifications.append(p["justification"])
    s.next_task_seq = int(p["next_task_seq"])
    s.pending_tasks.extend(TaskSpec.from_dict(t) for t in p["new_tasks"])
    issued = set(p["issued"])
    s.pending_tasks = [
        TaskSpec.from_dict({**t.to_dict(), "round": s.round}) if t.task_id in issued else t
        for t in s.pending_tasks
    ]
    if p["finished"]:
        s.finished = True
        s.pending_tasks = []
    return s


def _apply_review(state: SupervisorState, p: dict[str, Any]) -> SupervisorState:
    s = state.copy()
    reports = [ExplorerReport.from_dict(r) for r in p["reports"]]
    reported = {r.task_id for r in reports}
    s.received_reports.extend(reports)
    s.pending_tasks = [t for t in s.pending_tasks if t.task_id not in reported]
    s.pending_tasks.extend(TaskSpec.from_dict(t) for t in p["follow_ups"])
    s.hypotheses = list(p["hypotheses"])
    s.justifications.extend(p["justifications"])
    s.roi_relevance.update({k: float(v) for k, v in p["relevance"].items()})
    s.next_task_seq = int(p["next_task_seq"])
    return s


def apply_event(state: SupervisorState | None, event: TraceEvent) -> SupervisorState | None:
    """纯折叠：非状态事件原样返回"""
    if event.kind is EventKind.INIT:
        return _apply_init(event.payload)
    if state is None or event.kind not in STATE_EVENTS:
        return state
    if event.kind is EventKind.PLAN:
        return _apply_plan(state, event.payload)
    return _apply_review(state, event.payload)


def fold_states(events: list[TraceEvent], *, verify: bool = True) -> list[SupervisorState]:
    """按顺序重放状态事件，返回每个状态事件之后的状态序列

    Raises:
        ReplayMismatchError: verify 为 True 且重建状态摘要与事件记录不符
    """
    states: list[SupervisorState] = []
    state: SupervisorState | None = None
    for ev in events:
        if ev.kind not in STATE_EVENTS:
            continue
        state = apply_event(state, ev)
        if state is None:
            raise ReplayMismatchError(f"seq {ev.seq}: {ev.kind.value} 事件出现在 init 之前")
        recorded = ev.payload.get("state_digest")
        if verify and recorded is not None and recorded != state_digest(state):
            raise ReplayMismatchError(f"seq {ev.seq}: {ev.kind.value} 之后的状态摘要不一致")
        states.append(state)
    return states


# =========================================================================
# 一致性检查
# =========================================================================


def _check_seq(events: list[TraceEvent]) -> list[str]:
    return [f"seq 不连续: 位置 {i} 的 seq 为 {ev.seq}" for i, ev in enumerate(events) if ev.seq != i][:1]


def _check_rounds(events: list[TraceEvent]) -> list[str]:
    problems: list[str] = []
    expect = EventKind.PLAN
    last_round = 0
    finished_at: int | None = None
    for ev in events:
        if ev.kind in (EventKind.PLAN, EventKind.REVIEW):
            if ev.kind is not expect:
                problems.append(f"seq {ev.seq}: plan/review 未交替（期望 {expect.value}）")
            expect = EventKind.REVIEW if ev.kind is EventKind.PLAN else EventKind.PLAN
        if ev.kind is EventKind.PLAN:
            if int(ev.payload["round"]) != last_round + 1:
                problems.append(f"seq {ev.seq}: round 从 {last_round} 跳到 {ev.payload['round']}")
            last_round = int(ev.payload["round"])
            if ev.payload["finished"] and finished_at is None:
                finished_at = ev.seq
        if ev.kind is EventKind.TASK_ISSUED and finished_at is not None:
            problems.append(f"seq {ev.seq}: finished 之后仍下发任务 {ev.payload['task']['task_id']}")
    completed = any(ev.kind is EventKind.FINALIZE and ev.payload.get("status") == "completed" for ev in events)
    if completed and expect is not EventKind.PLAN:
        problems.append("最后一个 plan 没有对应的 review")
    return problems


def _check_reports(events: list[TraceEvent]) -> list[str]:
    problems: list[str] = []
    issued = [ev.payload["task"]["task_id"] for ev in events if ev.kind is EventKind.TASK_ISSUED]
    reports: dict[str, int] = {}
    for ev in events:
        if ev.kind is EventKind.REPORT:
            tid = ev.payload["task_id"]
            reports[tid] = reports.get(tid, 0) + 1
    for tid in issued:
        if reports.get(tid, 0) != 1:
            problems.append(f"任务 {tid} 有 {reports.get(tid, 0)} 份报告（期望 1）")
    for tid in sorted(set(reports) - set(issued)):
        problems.append(f"报告对应未下发的任务 {tid}")
    return problems


def check_trace(events: list[TraceEvent]) -> list[str]:
    """多智能体循环的一致性检查，返回全部违例"""
    problems = _check_seq(events) + _check_rounds(events) + _check_reports(events)
    for ev in events:
        if ev.kind is EventKind.COLLATE and len(ev.payload["roi_ids"]) > MAX_CITED_ROIS:
            problems.append(f"seq {ev.seq}: 汇总 ROI 数 {len(ev.payload['roi_ids'])} 超过 {MAX_CITED_ROIS}")
    return problems
