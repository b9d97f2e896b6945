"""统一异常体系

所有业务异常继承 SlideSeekError，替代散落的 ValueError / RuntimeError。
CLI 层据此映射退出码：校验类错误返回 1，I/O 与配置类错误返回 2。
"""

from __future__ import annotations


class SlideSeekError(Exception):
    """框架基础异常"""

    code: str = "UNKNOWN"

    def __init__(self, message: str) -> None:
        super().__init__(message)


class ConfigError(SlideSeekError):
    """配置文件缺失或内容无效"""

    code = "CONFIG_ERROR"


class DataError(SlideSeekError):
    """数据解析/序列化失败（JSON/YAML/PNG 等）"""

    code = "DATA_ERROR"


class SlideOpenError(DataError):
    """切片目录无法打开（manifest 缺失、层级几何不一致、tile 不可读）"""

    code = "SLIDE_OPEN_ERROR"


class TraceError(DataError):
    """trace 行解析失败，携带行号"""

    code = "TRACE_ERROR"

    def __init__(self, message: str, line_no: int = 0) -> None:
        super().__init__(f"第 {line_no} 行: {message}" if line_no else message)
        self.line_no = line_no


class StatsError(DataError):
    """统计输入不满足前置条件（空样本、长度不一致等）"""

    code = "STATS_ERROR"


class ValidationError(SlideSeekError):
    """输入数据校验失败"""

    code = "VALIDATION_ERROR"

    def __init__(self, message: str, details: list[str] | None = None) -> None:
        super().__init__(message)
        self.details = details or []


class ProtocolError(SlideSeekError):
    """智能体之间的协议违例（未知任务、重复报告等）"""

    code = "PROTOCOL_ERROR"


class BackendError(SlideSeekError):
    """模型后端调用失败（重试耗尽、HTTP 错误、超时）"""

    code = "BACKEND_ERROR"

    def __init__(self, message: str, endpoint: str = "") -> None:
        super().__init__(f"{message} [endpoint={endpoint}]" if endpoint else message)
        self.endpoint = endpoint


class DecisionError(SlideSeekError):
    """结构化决策在一次修复重试后仍不满足 schema"""

    code = "DECISION_ERROR"


class PlanningError(SlideSeekError):
    """监督者本轮提出的任务全部无效"""

    code = "PLANNING_ERROR"


class ReplayMismatchError(SlideSeekError):
    """回放重建的状态或图像与 trace 记录不一致"""

    code = "REPLAY_MISMATCH"

    def __init__(self, message: str, details: list[str] | None = None) -> None:
        super().__init__(message)
        self.details = details or []


class InternalError(SlideSeekError):
    """未归类的内部异常（包装原始异常，保留在 __cause__ 中）"""

    code = "INTERNAL_ERROR"

    @classmethod
    def wrap(cls, error: BaseException) -> InternalError:
        wrapped = cls(f"{type(error).__name__}: {error}")
        wrapped.__cause__ = error
        return wrapped
