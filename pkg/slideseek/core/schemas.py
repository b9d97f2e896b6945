"""结构化决策 schema

监督者与探索者的输出以严格 schema 交换：模型返回的 JSON 经 pydantic 校验，
多余字段忽略，缺失必填字段触发一次修复重试。脚本策略直接构造同样的对象。
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator


class _Decision(BaseModel):
    model_config = ConfigDict(extra="ignore", frozen=True)


class TaskDraft(_Decision):
    """待校验的任务草稿（区域为基准层像素）"""

    tissue_box_index: int | None = None
    x0: int
    y0: int
    x1: int
    y1: int
    magnification: float
    features_to_document: str
    budget: int | None = None


class InitDecision(_Decision):
    hypotheses: list[str] = Field(min_length=1)
    plan: str = Field(min_length=1)
    current_step: str
    justification: str
    tasks: list[TaskDraft] = Field(default_factory=list)


class PlanDecision(_Decision):
    hypotheses: list[str] = Field(min_length=1)
    plan: str = Field(min_length=1)
    current_step: str
    tasks: list[TaskDraft]
    justification: str
    finished: bool


class ReviewDecision(_Decision):
    hypotheses: list[str] = Field(min_length=1)
    justifications: list[str]
    follow_up_tasks: list[TaskDraft] = Field(default_factory=list)
    relevance: dict[str, float] = Field(default_factory=dict)

    @field_validator("relevance")
    @classmethod
    def _relevance_in_unit_interval(cls, v: dict[str, float]) -> dict[str, float]:
        bad = {k: s for k, s in v.items() if not 0.0 <= s <= 1.0}
        if bad:
            raise ValueError(f"relevance 必须位于 [0, 1]: {bad}")
        return v


class ReportDecision(_Decision):
    narrative: str = Field(min_length=1)
    confidence: Literal["Low", "High"]
    cited_roi_ids: list[str]


class ExplorerDecision(_Decision):
    action: Literal["view", "submit"]
    x0: int | None = None
    y0: int | None = None
    x1: int | None = None
    y1: int | None = None
    magnification: float | None = None
    rationale: str = ""
    findings: str = ""
    key_view_indices: list[int] = Field(default_factory=list)


class DifferentialDecision(_Decision):
    diagnoses: list[str] = Field(min_length=3, max_length=3)
