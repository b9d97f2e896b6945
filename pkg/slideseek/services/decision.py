"""结构化决策与重试

complete_with_retry: 后端调用按指数退避重试，每次重新尝试之前写一条 retry 事件；
请求（图像以摘要代替）与最终回复分别写成 backend_request / backend_response 事件；
decide: 解析模型回复为 pydantic schema，失败时写一条 repair 事件并追加一次修复提示，
第二次仍不合格抛 DecisionError。
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Any, TypeVar

import pydantic
from pydantic import BaseModel
from tenacity import RetryCallState, Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from slideseek.core.anyres import request_token_plan
from slideseek.core.exceptions import BackendError, DecisionError
from slideseek.core.models import EventKind
from slideseek.core.protocols import ChatBackend, ChatTurn, TraceSink
from slideseek.core.slide_store import image_digest
from slideseek.prompts import render_prompt

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

BACKEND_ACTOR = "backend"
_FENCE = re.compile(r"^\s*```[a-zA-Z]*\s*\n?(.*?)\n?\s*```\s*$", re.DOTALL)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff: float = 1.0  # 指数退避基数（秒），0 表示不等待


def describe_turns(turns: list[ChatTurn]) -> list[dict[str, Any]]:
    """请求体的 trace 形式：图像只保留像素摘要、尺寸与网格规划"""
    described: list[dict[str, Any]] = []
    for turn in turns:
        entry: dict[str, Any] = {"role": turn.role, "text": turn.text}
        if turn.images:
            entry["images"] = [
                {"digest": image_digest(img), "width": int(img.shape[1]), "height": int(img.shape[0]),
                 "grid": plan.to_dict()}
                for img, plan in turn.images
            ]
        described.append(entry)
    return described


def complete_with_retry(
    backend: ChatBackend,
    turns: list[ChatTurn],
    policy: RetryPolicy,
    sink: TraceSink | None = None,
    *,
    caller: str = BACKEND_ACTOR,
) -> str:
    """调用后端，最多 max_retries + 1 次；有 sink 时请求与最终回复各写一条事件

    Raises:
        BackendError: 重试耗尽
    """
    attempts = 0

    def _call(request: list[ChatTurn]) -> str:
        nonlocal attempts
        attempts += 1
        return backend.complete(request)

    def _before_sleep(rs: RetryCallState) -> None:
        err = rs.outcome.exception() if rs.outcome else None
        logger.warning("后端调用失败，第 %d 次重试: %s", rs.attempt_number, err)
        if sink is not None:
            sink.emit(BACKEND_ACTOR, EventKind.RETRY, {
                "endpoint": backend.endpoint,
                "attempt": rs.attempt_number,
                "error": str(err),
            })

    if sink is not None:
        sink.emit(BACKEND_ACTOR, EventKind.BACKEND_REQUEST, {
            "endpoint": backend.endpoint,
            "caller": caller,
            "turns": describe_turns(turns),
            "token_plan": request_token_plan([(img.shape[1], img.shape[0]) for t in turns for img, _ in t.images]),
        })
    retrying = Retrying(
        stop=stop_after_attempt(policy.max_retries + 1),
        wait=wait_exponential(multiplier=policy.backoff, min=0, max=60),
        retry=retry_if_exception_type(BackendError),
        before_sleep=_before_sleep,
        reraise=True,
    )
    reply = retrying(_call, turns)
    if sink is not None:
        sink.emit(BACKEND_ACTOR, EventKind.BACKEND_RESPONSE, {
            "endpoint": backend.endpoint,
            "caller": caller,
            "attempts": attempts,
            "text": reply,
        })
    return reply


def strip_fences(text: str) -> str:
    m = _FENCE.match(text)
    return m.group(1) if m else text.strip()


def parse_decision(reply: str, schema: type[M]) -> M:
    """JSON 文本 -> schema 实例；多余字段忽略"""
    try:
        data = json.loads(strip_fences(reply))
    except json.JSONDecodeError as e:
        raise DecisionError(f"回复不是有效 JSON: {e.msg}") from e
    try:
        return schema.model_validate(data)
    except pydantic.ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise DecisionError(f"{schema.__name__} 校验失败: {problems}") from e


def decide(
    backend: ChatBackend,
    turns: list[ChatTurn],
    schema: type[M],
    *,
    retry: RetryPolicy,
    sink: TraceSink | None = None,
    actor: str = BACKEND_ACTOR,
) -> M:
    """获取一个通过 schema 校验的决策（含一次修复重试）

    Raises:
        BackendError: 后端重试耗尽
        DecisionError: 修复后仍不满足 schema
    """
    reply = complete_with_retry(backend, turns, retry, sink, caller=actor)
    try:
        return parse_decision(reply, schema)
    except DecisionError as e:
        problem = str(e)
    logger.info("决策不合格，发起修复: %s", problem)
    if sink is not None:
        sink.emit(actor, EventKind.REPAIR, {"schema": schema.__name__, "problems": [problem]})
    repair_turns = [
        *turns,
        ChatTurn(role="assistant", text=reply),
        ChatTurn.user(render_prompt("repair", problems=problem)),
    ]
    return parse_decision(complete_with_retry(backend, repair_turns, retry, sink, caller=actor), schema)
