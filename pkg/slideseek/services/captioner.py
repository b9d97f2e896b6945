"""形态学描述器

ChatCaptioner 通过 chat 后端获取描述与鉴别诊断；MockCaptioner 以合成切片的 truth.json 为准，
输出只取决于输入区域，供无网络的端到端测试与回放使用。
caption_region 负责读取区域、调用描述器并把带 token 规划的 caption 事件写入 trace。
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Sequence

from slideseek.core.anyres import request_token_plan
from slideseek.core.exceptions import DecisionError
from slideseek.core.models import EventKind, LesionFocus, PyramidSlide, RasterImage, RegionSpec, ROIRecord
from slideseek.core.protocols import CaptionRequest, Captioner, ChatBackend, ChatTurn, TraceSink
from slideseek.core.schemas import DifferentialDecision
from slideseek.core.slide_store import read_region
from slideseek.prompts import PROMPT_VERSION, render_prompt
from slideseek.services.decision import RetryPolicy, complete_with_retry, decide

logger = logging.getLogger(__name__)

NO_LESION_DIFFERENTIAL = ["benign tissue", "reactive changes", "insufficient sampling"]
# 病灶描述措辞，由运行种子选择
LESION_PHRASES = (
    "atypical cells with crowded, pleomorphic nuclei",
    "crowded glands lined by atypical cells with enlarged nuclei",
    "sheets of pleomorphic cells with prominent nucleoli",
)


def caption_prompt() -> str:
    return render_prompt("caption").strip()


def caption_region(
    slide: PyramidSlide,
    region: RegionSpec,
    captioner: Captioner,
    *,
    max_edge: int,
    sink: TraceSink,
    actor: str,
    image: RasterImage | None = None,
) -> tuple[RasterImage, str]:
    """读取区域并获取描述，写入 caption 事件"""
    if image is None:
        image = read_region(slide, region, max_edge)
    h, w = image.shape[:2]
    text = captioner.caption(CaptionRequest(image=image, prompt=caption_prompt(), region=region, sink=sink)).strip()
    if not text:
        raise DecisionError(f"描述器返回空描述: {captioner.name}")
    sink.emit(actor, EventKind.CAPTION, {
        "region": region.to_dict(),
        "captioner": captioner.name,
        "prompt_version": PROMPT_VERSION,
        "token_plan": request_token_plan([(w, h)]),
        "caption": text,
    })
    return image, text


# =========================================================================
# HTTP 描述器
# =========================================================================


class ChatCaptioner:
    """基于 chat 后端的描述器（同一后端兼作鉴别诊断模型）"""

    name = "chat"

    def __init__(self, backend: ChatBackend, retry: RetryPolicy, sink: TraceSink | None = None) -> None:
        self.backend = backend
        self.retry = retry
        self.sink = sink

    def caption(self, request: CaptionRequest) -> str:
        turn = ChatTurn.user(request.prompt, [request.image])
        return complete_with_retry(self.backend, [turn], self.retry, request.sink or self.sink, caller="captioner")

    def differential(self, rois: list[ROIRecord], images: list[RasterImage], context: str) -> list[str]:
        if not rois:
            raise DecisionError("鉴别诊断至少需要一个 ROI")
        listing = "\n".join(
            f"{i + 1}. [{r.roi_id}] {r.region.magnification:g}x: {r.caption}" for i, r in enumerate(rois)
        )
        prompt = render_prompt("differential", count=len(rois), context=context or "none", regions=listing)
        turn = ChatTurn.user(prompt, images)
        decision = decide(self.backend, [turn], DifferentialDecision, retry=self.retry, sink=self.sink,
                          actor="supervisor")
        return list(decision.diagnoses)


# =========================================================================
# 真值描述器
# =========================================================================


def overlap_coefficient(region: RegionSpec, focus: LesionFocus) -> float:
    """|区域 ∩ 病灶| / min(|区域|, |病灶|)"""
    inter = region.intersection_area(focus.x0, focus.y0, focus.x1, focus.y1)
    smaller = min(region.area, focus.area)
    return inter / smaller if smaller > 0 else 0.0


class MockCaptioner:
    """按真值病灶框生成描述的确定性描述器：输出只取决于区域与 seed"""

    name = "mock"

    def __init__(
        self,
        lesions: Sequence[LesionFocus],
        *,
        label_map: dict[str, list[str]],
        overlap_threshold: float = 0.25,
        medium_power: float = 2.5,
        seed: int = 0,
    ) -> None:
        self.lesions = list(lesions)
        self.label_map = label_map
        self.overlap_threshold = overlap_threshold
        self.medium_power = medium_power
        self.phrase = LESION_PHRASES[seed % len(LESION_PHRASES)]

    def labels_at(self, region: RegionSpec) -> list[str]:
        """与区域重叠系数达到阈值的病灶标签（按病灶顺序）"""
        return [f.label for f in self.lesions if overlap_coefficient(region, f) >= self.overlap_threshold]

    def caption(self, request: CaptionRequest) -> str:
        labels = self.labels_at(request.region)
        if not labels:
            return "unremarkable tissue"
        if request.region.magnification < self.medium_power:
            return "architecturally atypical area"
        return f"{labels[0]}: {self.phrase}"

    def differential(self, rois: list[ROIRecord], images: list[RasterImage], context: str) -> list[str]:
        if not rois:
            raise DecisionError("鉴别诊断至少需要一个 ROI")
        counts = Counter(label for r in rois for label in set(self.labels_at(r.region)))
        if not counts:
            return list(NO_LESION_DIFFERENTIAL)
        primary = min(counts, key=lambda lbl: (-counts[lbl], lbl))
        distractors = list(self.label_map.get(primary, []))
        for fallback in NO_LESION_DIFFERENTIAL:
            if len(distractors) >= 2:
                break
            distractors.append(fallback)
        return [primary, *distractors[:2]]
