"""核心数据模型

所有核心数据类集中定义，消除 slide_store ↔ trace ↔ services 的循环依赖。
需要落盘或写入 trace 的类型提供 to_dict / from_dict，字段顺序即序列化顺序。
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Union

import numpy as np
from numpy.typing import NDArray

# 8 位 RGB 栅格，形状 (height, width, 3)
RasterImage = NDArray[np.uint8]


# =========================================================================
# 切片与区域
# =========================================================================


@dataclass(frozen=True)
class PyramidLevel:
    """金字塔单层几何"""

    downsample: int
    width: int
    height: int
    cols: int
    rows: int


@dataclass(frozen=True)
class PyramidSlide:
    """已校验的金字塔切片（打开后只读）"""

    slide_id: str
    path: str
    base_width: int
    base_height: int
    base_magnification: float
    tile_edge: int
    levels: tuple[PyramidLevel, ...]
    mpp: float | None = None

    def allowed_magnifications(self, candidates: list[float]) -> list[float]:
        """候选倍率中不超过基准倍率的部分，升序"""
        return sorted(float(m) for m in candidates if float(m) <= self.base_magnification)

    def describe(self) -> dict[str, Any]:
        return {
            "slide_id": self.slide_id,
            "base_width": self.base_width,
            "base_height": self.base_height,
            "base_magnification": self.base_magnification,
            "mpp": self.mpp,
        }


@dataclass(frozen=True)
class RegionSpec:
    """基准层像素坐标的矩形区域（左上含、右下不含）及请求倍率"""

    x0: int
    y0: int
    x1: int
    y1: int
    magnification: float

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(0, self.width) * max(0, self.height)

    def intersection_area(self, x0: int, y0: int, x1: int, y1: int) -> int:
        w = min(self.x1, x1) - max(self.x0, x0)
        h = min(self.y1, y1) - max(self.y0, y0)
        return w * h if w > 0 and h > 0 else 0

    def contains(self, other: RegionSpec) -> bool:
        return self.x0 <= other.x0 and self.y0 <= other.y0 and other.x1 <= self.x1 and other.y1 <= self.y1

    def to_dict(self) -> dict[str, Any]:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "magnification": self.magnification}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RegionSpec:
        return cls(
            x0=int(data["x0"]), y0=int(data["y0"]), x1=int(data["x1"]), y1=int(data["y1"]),
            magnification=float(data["magnification"]),
        )


@dataclass(frozen=True)
class TissueBox:
    """组织包围盒（基准层像素）"""

    index: int
    x0: int
    y0: int
    x1: int
    y1: int

    def region(self, magnification: float) -> RegionSpec:
        return RegionSpec(self.x0, self.y0, self.x1, self.y1, magnification)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TissueBox:
        return cls(**{k: int(data[k]) for k in ("index", "x0", "y0", "x1", "y1")})


@dataclass(frozen=True)
class LesionFocus:
    """合成切片的真值病灶框"""

    x0: int
    y0: int
    x1: int
    y1: int
    label: str

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LesionFocus:
        return cls(int(data["x0"]), int(data["y0"]), int(data["x1"]), int(data["y1"]), str(data["label"]))


@dataclass
class SyntheticSlideSpec:
    """合成切片规格：组织椭圆、病灶与背景纹理参数"""

    slide_id: str = "synthetic"
    width: int = 4096
    height: int = 4096
    base_magnification: float = 20.0
    tile_edge: int = 512
    downsamples: list[int] = field(default_factory=lambda: [1, 4, 16])
    mpp: float | None = 0.5
    background_rgb: tuple[int, int, int] = (242, 242, 240)
    background_noise: int = 3
    tissue_rgb: tuple[int, int, int] = (226, 150, 188)
    lesion_rgb: tuple[int, int, int] = (128, 64, 150)
    texture_amplitude: int = 12
    tissue_boxes: list[tuple[int, int, int, int]] = field(default_factory=list)
    lesion_foci: list[LesionFocus] = field(default_factory=list)
    rng_seed: int = 0


# =========================================================================
# 智能体协议
# =========================================================================


class Confidence(str, Enum):
    """报告置信度"""

    LOW = "Low"
    HIGH = "High"


@dataclass(frozen=True)
class TaskSpec:
    """监督者下发给探索者的任务"""

    task_id: str
    tissue_box_index: int | None  # None 表示整张切片
    region: RegionSpec
    features_to_document: str
    context: str
    budget: int
    round: int = 0  # 下发轮次，0 表示尚在队列中

    @property
    def magnification(self) -> float:
        return self.region.magnification

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "tissue_box_index": self.tissue_box_index,
            "region": self.region.to_dict(),
            "features_to_document": self.features_to_document,
            "context": self.context,
            "budget": self.budget,
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TaskSpec:
        box = data.get("tissue_box_index")
        return cls(
            task_id=str(data["task_id"]),
            tissue_box_index=None if box is None else int(box),
            region=RegionSpec.from_dict(data["region"]),
            features_to_document=str(data["features_to_document"]),
            context=str(data["context"]),
            budget=int(data["budget"]),
            round=int(data.get("round", 0)),
        )


@dataclass(frozen=True)
class ROIRecord:
    """探索者标记的关键区域"""

    roi_id: str
    region: RegionSpec
    caption: str
    source_task: str
    flagged_relevant: bool
    round: int = 0
    relevance: float | None = None  # 策略打分；None 时按是否标记取 1 或 0

    @property
    def score(self) -> float:
        if self.relevance is not None:
            return self.relevance
        return 1.0 if self.flagged_relevant else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "roi_id": self.roi_id,
            "region": self.region.to_dict(),
            "caption": self.caption,
            "source_task": self.source_task,
            "flagged_relevant": self.flagged_relevant,
            "round": self.round,
            "relevance": self.relevance,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ROIRecord:
        rel = data.get("relevance")
        return cls(
            roi_id=str(data["roi_id"]),
            region=RegionSpec.from_dict(data["region"]),
            caption=str(data["caption"]),
            source_task=str(data["source_task"]),
            flagged_relevant=bool(data["flagged_relevant"]),
            round=int(data.get("round", 0)),
            relevance=None if rel is None else float(rel),
        )


@dataclass(frozen=True)
class ExplorerReport:
    """探索者返回给监督者的报告"""

    task_id: str
    findings: str
    rois: list[ROIRecord]
    views_used: int
    failed: bool = False
    error: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "findings": self.findings,
            "rois": [r.to_dict() for r in self.rois],
            "views_used": self.views_used,
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExplorerReport:
        return cls(
            task_id=str(data["task_id"]),
            findings=str(data["findings"]),
            rois=[ROIRecord.from_dict(r) for r in data.get("rois", [])],
            views_used=int(data["views_used"]),
            failed=bool(data.get("failed", False)),
            error=str(data.get("error", "")),
        )


@dataclass
class SupervisorState:
    """监督者状态；只能通过 trace.apply_event 演进"""

    slide_id: str = ""
    hypotheses: list[str] = field(default_factory=list)
    plan: str = ""
    current_step: str = ""
    pending_tasks: list[TaskSpec] = field(default_factory=list)
    received_reports: list[ExplorerReport] = field(default_factory=list)
    justifications: list[str] = field(default_factory=list)
    finished: bool = False
    round: int = 0
    next_task_seq: int = 0
    roi_relevance: dict[str, float] = field(default_factory=dict)
    tissue_boxes: list[TissueBox] = field(default_factory=list)

    def issued_tasks(self) -> list[TaskSpec]:
        """本轮已下发、尚未收到报告的任务"""
        return [t for t in self.pending_tasks if t.round == self.round and t.round > 0]

    def queued_tasks(self) -> list[TaskSpec]:
        return [t for t in self.pending_tasks if t.round == 0]

    def all_rois(self) -> list[ROIRecord]:
        return [roi for rep in self.received_reports for roi in rep.rois]

    def copy(self) -> SupervisorState:
        return copy.deepcopy(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "slide_id": self.slide_id,
            "hypotheses": list(self.hypotheses),
            "plan": self.plan,
            "current_step": self.current_step,
            "pending_tasks": [t.to_dict() for t in self.pending_tasks],
            "received_reports": [r.to_dict() for r in self.received_reports],
            "justifications": list(self.justifications),
            "finished": self.finished,
            "round": self.round,
            "next_task_seq": self.next_task_seq,
            "roi_relevance": dict(sorted(self.roi_relevance.items())),
            "tissue_boxes": [b.to_dict() for b in self.tissue_boxes],
        }


@dataclass(frozen=True)
class DiagnosisReport:
    """最终诊断报告"""

    slide_id: str
    primary_diagnosis: str
    differentials: list[str]
    confidence: Confidence
    narrative: str
    cited_rois: list[ROIRecord]
    rounds: int = 0
    views: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "slide_id": self.slide_id,
            "primary_diagnosis": self.primary_diagnosis,
            "differentials": list(self.differentials),
            "confidence": self.confidence.value,
            "narrative": self.narrative,
            "cited_rois": [r.to_dict() for r in self.cited_rois],
            "rounds": self.rounds,
            "views": self.views,
        }


# =========================================================================
# Trace
# =========================================================================


class EventKind(str, Enum):
    """trace 事件类型"""

    INIT = "init"
    PLAN = "plan"
    TASK_ISSUED = "task_issued"
    VIEW = "view"
    CAPTION = "caption"
    REPORT = "report"
    REVIEW = "review"
    COLLATE = "collate"
    DIAGNOSE = "diagnose"
    FINALIZE = "finalize"
    RETRY = "retry"
    REPAIR = "repair"
    BACKEND_REQUEST = "backend_request"
    BACKEND_RESPONSE = "backend_response"


@dataclass(frozen=True)
class TraceEvent:
    """trace 中的一行"""

    seq: int
    wall_time: float
    actor: str
    kind: EventKind
    payload: dict[str, Any]


def explorer_actor(task_id: str) -> str:
    return f"explorer:{task_id}"


# =========================================================================
# 探索者
# =========================================================================


@dataclass
class ExplorerState:
    """单个探索任务的导航状态"""

    task: TaskSpec
    visited: list[RegionSpec] = field(default_factory=list)
    captions: list[tuple[RegionSpec, str]] = field(default_factory=list)
    rationales: list[str] = field(default_factory=list)
    views_remaining: int = 0
    done: bool = False
    report: ExplorerReport | None = None

    @classmethod
    def start(cls, task: TaskSpec) -> ExplorerState:
        return cls(task=task, views_remaining=task.budget)


@dataclass(frozen=True)
class View:
    """导航动作：查看一个区域"""

    region: RegionSpec
    rationale: str


@dataclass(frozen=True)
class Submit:
    """导航动作：提交报告"""

    report: ExplorerReport


NavigationAction = Union[View, Submit]


# =========================================================================
# 评估
# =========================================================================


@dataclass(frozen=True)
class OutcomeRecord:
    """单病例评估记录"""

    case_id: str
    gold: str
    predictions: list[str]
    confidence: Confidence
    regions_by_mag: dict[str, int] = field(default_factory=dict)
    rarity: str | None = None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "case_id": self.case_id,
            "gold": self.gold,
            "predictions": list(self.predictions),
            "confidence": self.confidence.value,
            "regions_by_mag": dict(self.regions_by_mag),
        }
        if self.rarity is not None:
            data["rarity"] = self.rarity
        return data


@dataclass(frozen=True)
class StatResult:
    """点估计 + 95% 置信区间"""

    point: float
    ci_low: float
    ci_high: float
    n: int
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)
