"""轮次调度器 - 管理一轮探索任务的并行执行

监督者严格串行；每轮把已下发任务交给线程池并行执行，并在屏障处等待全部完成或失败。
结果顺序与输入顺序一致，单个任务的异常被收集为失败结果而不会中断同轮其他任务。
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Generic, TypeVar

from slideseek.core.exceptions import InternalError, SlideSeekError
from slideseek.core.models import TaskSpec

logger = logging.getLogger(__name__)

R = TypeVar("R")


@dataclass
class TaskOutcome(Generic[R]):
    """单个任务的执行结果：value 与 error 二选一"""

    task: TaskSpec
    value: R | None = None
    error: SlideSeekError | None = None
    duration: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None


class RoundScheduler:
    """可配置并行度的轮次调度器"""

    def __init__(self, max_workers: int = 0) -> None:
        # 0 表示并行度等于本轮任务数
        self.max_workers = max(0, max_workers)

    def _execute_one(self, task: TaskSpec, fn: Callable[[TaskSpec], R]) -> TaskOutcome[R]:
        start = time.monotonic()
        try:
            return TaskOutcome(task=task, value=fn(task), duration=time.monotonic() - start)
        except SlideSeekError as e:
            logger.error("任务失败: %s -> %s", task.task_id, e)
            return TaskOutcome(task=task, error=e, duration=time.monotonic() - start)
        except Exception as e:
            logger.exception("任务内部异常: %s", task.task_id)
            return TaskOutcome(task=task, error=InternalError.wrap(e), duration=time.monotonic() - start)

    def run_round(self, tasks: list[TaskSpec], fn: Callable[[TaskSpec], R]) -> list[TaskOutcome[R]]:
        """执行一轮任务并在全部结束后返回，结果与输入顺序一致"""
        if not tasks:
            return []
        workers = min(len(tasks), self.max_workers or len(tasks))
        if workers == 1:
            return [self._execute_one(t, fn) for t in tasks]

        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="explorer") as executor:
            futures = [executor.submit(self._execute_one, t, fn) for t in tasks]
            outcomes = []
            for task, future in zip(tasks, futures):
                outcome = future.result()
                logger.info("完成: %s -> %s (%.1f秒)", task.task_id, "ok" if outcome.ok else "failed",
                            outcome.duration)
                outcomes.append(outcome)
            return outcomes
