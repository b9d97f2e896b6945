"""服务容器：统一依赖注入，消除跨服务的裸构造

后端客户端、并发限制器与调度器在同一容器内共享；描述器与策略依赖本次运行的
trace 接收端和切片目录，因此由工厂方法按运行构造。

依赖关系图（→ 表示依赖）:
  agent_backend   → limiter
  caption_backend → limiter
  make_captioner  → caption_backend（http） / truth.json（mock）
  make_supervisor_policy → agent_backend（http）

用法:
    container = ServiceContainer(config=Config.from_file("configs/mock.yml"))
    policy = container.make_supervisor_policy(sink)
"""

from __future__ import annotations

import logging
import threading
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from slideseek.core.config import Config
    from slideseek.core.protocols import Captioner, ChatBackend, ExplorerPolicy, SupervisorPolicy, TraceSink
    from slideseek.core.resource import ConcurrencyLimiter
    from slideseek.core.scheduler import RoundScheduler
    from slideseek.services.decision import RetryPolicy

logger = logging.getLogger(__name__)


class ServiceContainer:
    """懒加载服务容器：每个实例持有一组共享的后端与调度器"""

    def __init__(self, config: Config | None = None) -> None:
        self._lock = threading.RLock()
        self._instances: dict[str, object] = {}
        if config is None:
            from slideseek.core.config import Config
            config = Config()
        self._config = config

    def _get_or_create(self, key: str, factory: object) -> object:
        """线程安全的懒加载：双重检查锁"""
        if key in self._instances:
            return self._instances[key]
        with self._lock:
            if key not in self._instances:
                self._instances[key] = factory()  # type: ignore[operator]
            return self._instances[key]

    @property
    def config(self) -> Config:
        return self._config

    @property
    def retry(self) -> RetryPolicy:
        from slideseek.services.decision import RetryPolicy
        return RetryPolicy(max_retries=self._config.max_retries, backoff=self._config.retry_backoff)

    # ---- 共享资源 ----

    @property
    def limiter(self) -> ConcurrencyLimiter:
        def _create() -> ConcurrencyLimiter:
            from slideseek.core.resource import ConcurrencyLimiter
            return ConcurrencyLimiter(capacity=self._config.endpoint_concurrency)
        return self._get_or_create("limiter", _create)  # type: ignore[return-value]

    @property
    def scheduler(self) -> RoundScheduler:
        def _create() -> RoundScheduler:
            from slideseek.core.scheduler import RoundScheduler
            return RoundScheduler(max_workers=self._config.parallelism)
        return self._get_or_create("scheduler", _create)  # type: ignore[return-value]

    def _http_backend(self, endpoint: str, model: str) -> ChatBackend:
        from slideseek.services.chat_client import HttpChatBackend, resolve_api_key
        cfg = self._config
        return HttpChatBackend(
            endpoint, model,
            api_key=resolve_api_key(cfg.api_key_env),
            timeout=cfg.request_timeout,
            temperature=cfg.temperature,
            limiter=self.limiter,
        )

    @property
    def agent_backend(self) -> ChatBackend:
        def _create() -> ChatBackend:
            return self._http_backend(self._config.agent_endpoint, self._config.agent_model)
        return self._get_or_create("agent_backend", _create)  # type: ignore[return-value]

    @property
    def caption_backend(self) -> ChatBackend:
        def _create() -> ChatBackend:
            cfg = self._config
            return self._http_backend(cfg.captioner_endpoint or cfg.agent_endpoint,
                                      cfg.captioner_model or cfg.agent_model)
        return self._get_or_create("caption_backend", _create)  # type: ignore[return-value]

    # ---- 按运行构造 ----

    def make_captioner(self, slide_path: str, sink: TraceSink | None = None) -> Captioner:
        """mock 后端读取切片目录下的 truth.json，http 后端走 chat 描述器"""
        cfg = self._config
        if cfg.backend == "mock":
            from slideseek.core.synthetic import load_truth
            from slideseek.services.captioner import MockCaptioner
            lesions = load_truth(slide_path)
            logger.debug("真值描述器: %d 个病灶", len(lesions))
            return MockCaptioner(lesions, label_map=cfg.label_map, overlap_threshold=cfg.overlap_threshold,
                                 medium_power=cfg.medium_power, seed=cfg.seed)
        from slideseek.services.captioner import ChatCaptioner
        return ChatCaptioner(self.caption_backend, self.retry, sink)

    def make_supervisor_policy(self, sink: TraceSink | None = None) -> SupervisorPolicy:
        from slideseek.services import policies
        cfg = self._config
        if cfg.mode == "single_agent":
            return policies.SingleAgentPolicy(cfg)
        if cfg.backend == "mock":
            return policies.ScriptedSupervisorPolicy(cfg)
        return policies.LLMSupervisorPolicy(self.agent_backend, cfg, self.retry, sink)

    def make_explorer_policy(self) -> ExplorerPolicy:
        from slideseek.services import policies
        cfg = self._config
        if cfg.backend == "mock":
            return policies.SweepExplorerPolicy(cfg)
        return policies.LLMExplorerPolicy(self.agent_backend, cfg, self.retry)

    def close(self) -> None:
        """关闭已创建的 HTTP 客户端"""
        with self._lock:
            for key in ("agent_backend", "caption_backend"):
                backend = self._instances.pop(key, None)
                close = getattr(backend, "close", None)
                if callable(close):
                    close()
