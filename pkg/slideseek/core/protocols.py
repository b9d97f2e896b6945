"""探索引擎的可插拔接口

监督者与探索者只依赖这里的策略、描述器与 trace 接收端协议，
HTTP 模型与脚本化实现都按结构满足它们。
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Protocol

from slideseek.core.anyres import GridPlan, plan_grid

if TYPE_CHECKING:
    from slideseek.core.models import (
        EventKind,
        ExplorerState,
        PyramidSlide,
        RasterImage,
        RegionSpec,
        ROIRecord,
        SupervisorState,
        TissueBox,
        TraceEvent,
    )
    from slideseek.core.schemas import (
        ExplorerDecision,
        InitDecision,
        PlanDecision,
        ReportDecision,
        ReviewDecision,
    )

# =========================================================================
# Trace
# =========================================================================


class TraceSink(Protocol):
    """trace 接收端：TraceAppender 直接落盘，TraceBuffer 暂存到轮次屏障后提交"""

    def emit(self, actor: str, kind: EventKind, payload: dict[str, Any]) -> TraceEvent | None:
        ...


# =========================================================================
# 模型后端
# =========================================================================


@dataclass(frozen=True)
class ChatTurn:
    """一轮对话；图像只允许出现在 user 轮，每张图带着它的 AnyRes 网格规划"""

    role: str
    text: str
    images: tuple[tuple[RasterImage, GridPlan], ...] = ()

    @classmethod
    def user(cls, text: str, images: Sequence[RasterImage] = ()) -> ChatTurn:
        planned = tuple((img, plan_grid(img.shape[1], img.shape[0])) for img in images)
        return cls(role="user", text=text, images=planned)


class ChatBackend(Protocol):
    """chat-completions 风格的文本补全后端"""

    endpoint: str

    def complete(self, turns: list[ChatTurn]) -> str:
        ...


@dataclass(frozen=True)
class CaptionRequest:
    """描述请求：图像 + 提示词 + 元数据（区域坐标供脚本描述器查真值）"""

    image: RasterImage
    prompt: str
    region: RegionSpec
    sink: TraceSink | None = None  # 重试事件写入调用方的 trace 接收端


class Captioner(Protocol):
    """形态学描述与鉴别诊断后端"""

    name: str

    def caption(self, request: CaptionRequest) -> str:
        ...

    def differential(self, rois: list[ROIRecord], images: list[RasterImage], context: str) -> list[str]:
        ...


# =========================================================================
# 智能体策略
# =========================================================================


@dataclass(frozen=True)
class SupervisorContext:
    """监督者每次决策可见的输入"""

    slide: PyramidSlide
    tissue_boxes: list[TissueBox]
    clinical_context: str
    thumbnail: Callable[[], RasterImage]


class SupervisorPolicy(Protocol):
    def initial(self, ctx: SupervisorContext, feedback: str | None = None) -> InitDecision:
        ...

    def plan(self, state: SupervisorState, ctx: SupervisorContext, feedback: str | None = None) -> PlanDecision:
        ...

    def review(self, state: SupervisorState, ctx: SupervisorContext, reports: list[Any],
               feedback: str | None = None) -> ReviewDecision:
        ...

    def report(self, state: SupervisorState, ctx: SupervisorContext, rois: list[ROIRecord],
               diagnoses: list[str], feedback: str | None = None) -> ReportDecision:
        ...


class ExplorerPolicy(Protocol):
    def next_action(self, state: ExplorerState, slide: PyramidSlide, thumbnail: Callable[[], RasterImage],
                    feedback: str | None = None, sink: TraceSink | None = None) -> ExplorerDecision:
        ...
