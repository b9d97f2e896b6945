"""chat-completions HTTP 客户端

请求体为 {model, messages, temperature}；图像以 base64 PNG 的 image_url 片段随 user 轮发送，
图与图之间插入一个 "\\n" 文本片段。每个端点的并发数由 ConcurrencyLimiter 限制。
单次调用失败抛 BackendError，重试由 decision.complete_with_retry 负责。
"""

from __future__ import annotations

import base64
import logging
import os
from typing import Any

import httpx

from slideseek.core.anyres import plan_grid
from slideseek.core.exceptions import BackendError, ConfigError
from slideseek.core.protocols import ChatTurn
from slideseek.core.resource import ConcurrencyLimiter
from slideseek.core.slide_store import encode_png
from slideseek.utils.net import validate_endpoint

logger = logging.getLogger(__name__)

_ROLES = ("system", "user", "assistant")


def _image_part(image: Any) -> dict[str, Any]:
    b64 = base64.b64encode(encode_png(image)).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}}


def turn_to_message(turn: ChatTurn) -> dict[str, Any]:
    """ChatTurn -> chat-completions message；图像按顺序排列，图与图之间插入换行片段"""
    if turn.role not in _ROLES:
        raise BackendError(f"未知角色: {turn.role}")
    if not turn.images:
        return {"role": turn.role, "content": turn.text}
    if turn.role != "user":
        raise BackendError(f"图像只允许出现在 user 轮: {turn.role}")
    parts: list[dict[str, Any]] = [{"type": "text", "text": turn.text}]
    for i, (image, plan) in enumerate(turn.images):
        h, w = image.shape[:2]
        if plan != plan_grid(w, h):
            raise BackendError(f"第 {i + 1} 张图的网格规划与尺寸 {w}x{h} 不符")
        if i:
            parts.append({"type": "text", "text": "\n"})
        parts.append(_image_part(image))
    return {"role": "user", "content": parts}


def resolve_api_key(env_var: str) -> str:
    key = os.getenv(env_var, "")
    if not key:
        raise ConfigError(f"环境变量 {env_var} 未设置，无法调用 HTTP 后端")
    return key


class HttpChatBackend:
    """同步 chat-completions 客户端，可并发调用"""

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        api_key: str = "",
        timeout: float = 60.0,
        temperature: float = 0.0,
        limiter: ConcurrencyLimiter | None = None,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.endpoint = validate_endpoint(endpoint, context="chat endpoint")
        self.model = model
        self.temperature = temperature
        self._limiter = limiter or ConcurrencyLimiter()
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def request_body(self, turns: list[ChatTurn]) -> dict[str, Any]:
        return {
            "model": self.model,
            "messages": [turn_to_message(t) for t in turns],
            "temperature": self.temperature,
        }

    def complete(self, turns: list[ChatTurn]) -> str:
        body = self.request_body(turns)
        with self._limiter.hold(self.endpoint):
            try:
                resp = self._client.post(self.endpoint, json=body)
            except httpx.HTTPError as e:
                raise BackendError(f"请求失败: {e}", self.endpoint) from e
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", self.endpoint)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendError(f"响应格式无效: {e}", self.endpoint) from e
        if not isinstance(content, str) or not content.strip():
            raise BackendError("响应内容为空", self.endpoint)
        logger.debug("后端响应: %s (%d 字符)", self.endpoint, len(content))
        return content

    def close(self) -> None:
        self._client.close()
