"""任务与视野校验

违例以数据形式返回（全部列出而非遇到第一个就停），由调用方决定修复重试或拒绝。
"""

from __future__ import annotations

import re

from slideseek.core.models import PyramidSlide, RegionSpec, TaskSpec
from slideseek.core.slide_store import check_region

DEFAULT_MODALITY_BLOCKLIST = ("IHC", "immunohistochemistry", "special stain", "molecular testing")


def modality_violations(text: str, blocklist: list[str] | tuple[str, ...] = DEFAULT_MODALITY_BLOCKLIST) -> list[str]:
    """任务文本中请求了仅凭 H&E 切片无法获得的检查"""
    found: list[str] = []
    for term in blocklist:
        if re.search(rf"\b{re.escape(term)}", text, flags=re.IGNORECASE):
            found.append(f"modality not available: {term}")
    return found


def validate_task(
    task: TaskSpec,
    slide: PyramidSlide,
    *,
    allowed: list[float] | None = None,
    blocklist: list[str] | tuple[str, ...] = DEFAULT_MODALITY_BLOCKLIST,
) -> list[str]:
    """返回任务的全部违例，空列表表示通过"""
    problems = check_region(slide, task.region, allowed)
    if task.budget < 1:
        problems.append(f"budget 必须 >= 1: {task.budget}")
    if not task.features_to_document.strip():
        problems.append("features_to_document 不能为空")
    problems.extend(modality_violations(task.features_to_document, blocklist))
    problems.extend(f"context: {v}" for v in modality_violations(task.context, blocklist))
    return problems


def validate_view(
    region: RegionSpec,
    task: TaskSpec,
    slide: PyramidSlide,
    *,
    allowed: list[float] | None = None,
) -> list[str]:
    """探索者视野必须合法且不超出任务区域"""
    problems = check_region(slide, region, allowed)
    if not task.region.contains(region):
        problems.append(
            f"视野 ({region.x0},{region.y0},{region.x1},{region.y1}) 超出任务区域 "
            f"({task.region.x0},{task.region.y0},{task.region.x1},{task.region.y1})",
        )
    return problems
