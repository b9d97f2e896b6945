"""组织检测

在长边 <= 1024 的缩略图上取 HSV 饱和度，以 Otsu 阈值（不低于 min_saturation）二值化，
3x3 闭运算后做连通域分析，丢弃面积 < 0.05% 的碎片，并合并间距 < 1% 边长的包围盒。
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.measure import label, regionprops

from slideseek.core.models import PyramidSlide, RasterImage, TissueBox
from slideseek.core.slide_store import read_level

logger = logging.getLogger(__name__)

DETECTION_EDGE = 1024
MIN_TISSUE_FRACTION = 0.0005
MERGE_GAP_FRACTION = 0.01
MIN_SATURATION = 0.05


@dataclass(frozen=True)
class TissueMask:
    """检测分辨率下的前景掩码及其到基准层的缩放"""

    mask: NDArray[np.bool_]
    scale_x: float  # 基准像素 / 掩码像素
    scale_y: float


def _detection_image(slide: PyramidSlide, edge: int, min_level: int = 0) -> RasterImage:
    """取长边 <= edge 的最浅层；若没有则取最深层再面积缩放"""
    chosen = None
    for k, lv in enumerate(slide.levels):
        if k >= min_level and max(lv.width, lv.height) <= edge:
            chosen = k
            break
    if chosen is not None:
        return read_level(slide, chosen)
    deepest = len(slide.levels) - 1
    img = read_level(slide, max(deepest, min_level))
    h, w = img.shape[:2]
    scale = edge / max(w, h)
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return np.asarray(Image.fromarray(img).resize(size, Image.Resampling.BOX), dtype=np.uint8)


def saturation(image: RasterImage) -> NDArray[np.float64]:
    rgb = image.astype(np.float64)
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    sat = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=sat, where=mx > 0)
    return sat


def tissue_mask(slide: PyramidSlide, *, edge: int = DETECTION_EDGE, min_level: int = 0,
                min_saturation: float = MIN_SATURATION) -> TissueMask:
    """饱和度 Otsu 阈值 + 3x3 闭运算得到的前景掩码"""
    img = _detection_image(slide, edge, min_level)
    sat = saturation(img)
    if float(sat.max()) - float(sat.min()) < 1e-9:
        mask = np.zeros(sat.shape, dtype=bool)
    else:
        thr = max(float(threshold_otsu(sat)), min_saturation)
        mask = ndimage.binary_closing(sat > thr, structure=np.ones((3, 3), dtype=bool))
    h, w = mask.shape
    return TissueMask(mask=mask, scale_x=slide.base_width / w, scale_y=slide.base_height / h)


def _gap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> int:
    gx = max(0, max(a[0], b[0]) - min(a[2], b[2]))
    gy = max(0, max(a[1], b[1]) - min(a[3], b[3]))
    return max(gx, gy)


def merge_boxes(boxes: list[tuple[int, int, int, int]], merge_gap: float) -> list[tuple[int, int, int, int]]:
    """反复合并间距 < merge_gap 的包围盒直到稳定"""
    merged = list(boxes)
    changed = True
    while changed:
        changed = False
        for i in range(len(merged)):
            for j in range(i + 1, len(merged)):
                a, b = merged[i], merged[j]
                if _gap(a, b) < merge_gap:
                    merged[i] = (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))
                    del merged[j]
                    changed = True
                    break
            if changed:
                break
    return merged


def detect_tissue(slide: PyramidSlide, *, edge: int = DETECTION_EDGE, min_level: int = 0) -> list[TissueBox]:
    """组织包围盒，按左上角 (y0, x0) 行优先编号；无组织时返回空列表"""
    tm = tissue_mask(slide, edge=edge, min_level=min_level)
    mask = tm.mask
    h, w = mask.shape
    min_area = MIN_TISSUE_FRACTION * h * w
    boxes: list[tuple[int, int, int, int]] = []
    for prop in regionprops(label(mask, connectivity=2)):
        if prop.area < min_area:
            continue
        r0, c0, r1, c1 = prop.bbox
        boxes.append((int(c0), int(r0), int(c1), int(r1)))
    boxes = merge_boxes(boxes, MERGE_GAP_FRACTION * max(h, w))

    result: list[TissueBox] = []
    for x0, y0, x1, y1 in sorted(boxes, key=lambda b: (b[1], b[0])):
        result.append(TissueBox(
            index=len(result),
            x0=max(0, math.floor(x0 * tm.scale_x)),
            y0=max(0, math.floor(y0 * tm.scale_y)),
            x1=min(slide.base_width, math.ceil(x1 * tm.scale_x)),
            y1=min(slide.base_height, math.ceil(y1 * tm.scale_y)),
        ))
    logger.info("组织检测: %s -> %d 个包围盒", slide.slide_id, len(result))
    return result


def count_tissue_rois(slide: PyramidSlide, *, magnification: float = 20.0, roi_px: int = 896) -> int:
    """给定倍率下 roi_px 见方的网格格子中与组织掩码相交的数量（穷举高倍巡检的工作量）"""
    tm = tissue_mask(slide)
    cell = roi_px * slide.base_magnification / magnification
    cols = math.ceil(slide.base_width / cell)
    rows = math.ceil(slide.base_height / cell)
    count = 0
    for r in range(rows):
        for c in range(cols):
            mx0 = math.floor(c * cell / tm.scale_x)
            my0 = math.floor(r * cell / tm.scale_y)
            mx1 = max(mx0 + 1, math.ceil(min(slide.base_width, (c + 1) * cell) / tm.scale_x))
            my1 = max(my0 + 1, math.ceil(min(slide.base_height, (r + 1) * cell) / tm.scale_y))
            if tm.mask[my0:my1, mx0:mx1].any():
                count += 1
    return count
