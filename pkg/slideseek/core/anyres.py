"""AnyRes 切块规划

把任意尺寸的图像映射到 {1x1, 1x2, 2x1, 2x2} 的 448 像素网格:
长边超过 896 时先等比缩放到 896 以内，再在右侧/下方补黑；
网格多于 1 块时在序列最前面附加一张 448x448 的全图缩略图。
每块（含缩略图）对应 128 个图像 token。
长边刚越过 896 时短边随之缩小，列数或行数可能回落，token 数因此不随尺寸单调（449x896 为 640，449x897 为 384）。
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from slideseek.core.exceptions import ValidationError
from slideseek.core.models import RasterImage

TILE_EDGE = 448
MAX_GRID = 2
MAX_EDGE = TILE_EDGE * MAX_GRID
TOKENS_PER_TILE = 128
PAD_COLOR = (0, 0, 0)
IMAGE_TOKEN = "<image>"
NEWLINE_TOKEN = "\n"


@dataclass(frozen=True)
class GridPlan:
    grid_cols: int
    grid_rows: int
    scaled_width: int
    scaled_height: int

    @property
    def padded_width(self) -> int:
        return self.grid_cols * TILE_EDGE

    @property
    def padded_height(self) -> int:
        return self.grid_rows * TILE_EDGE

    @property
    def include_thumbnail(self) -> bool:
        return self.grid_cols * self.grid_rows > 1

    @property
    def tile_count(self) -> int:
        return self.grid_cols * self.grid_rows + (1 if self.include_thumbnail else 0)

    def to_dict(self) -> dict[str, int | bool]:
        return {
            "grid_cols": self.grid_cols,
            "grid_rows": self.grid_rows,
            "scaled_width": self.scaled_width,
            "scaled_height": self.scaled_height,
            "include_thumbnail": self.include_thumbnail,
            "tokens": self.tile_count * TOKENS_PER_TILE,
        }


@dataclass(frozen=True)
class TileSequence:
    plan: GridPlan
    thumbnail: RasterImage | None
    tiles: list[RasterImage]

    @property
    def token_count(self) -> int:
        return TOKENS_PER_TILE * (len(self.tiles) + (1 if self.thumbnail is not None else 0))

    def ordered(self) -> list[RasterImage]:
        """序列顺序：缩略图（若有）在前，随后行优先的网格块"""
        return ([self.thumbnail] if self.thumbnail is not None else []) + list(self.tiles)


def _scaled_dims(width: int, height: int) -> tuple[int, int]:
    if max(width, height) <= MAX_EDGE:
        return width, height
    scale = MAX_EDGE / max(width, height)
    return max(1, round(width * scale)), max(1, round(height * scale))


def plan_grid(width: int, height: int) -> GridPlan:
    if width < 1 or height < 1:
        raise ValidationError(f"图像尺寸必须 >= 1: {width}x{height}")
    sw, sh = _scaled_dims(width, height)
    return GridPlan(
        grid_cols=math.ceil(sw / TILE_EDGE),
        grid_rows=math.ceil(sh / TILE_EDGE),
        scaled_width=sw,
        scaled_height=sh,
    )


def token_count(width: int, height: int) -> int:
    return TOKENS_PER_TILE * plan_grid(width, height).tile_count


def tile_image(image: RasterImage) -> TileSequence:
    h, w = image.shape[:2]
    plan = plan_grid(w, h)
    scaled = image
    if (plan.scaled_width, plan.scaled_height) != (w, h):
        scaled = np.asarray(
            Image.fromarray(image).resize((plan.scaled_width, plan.scaled_height), Image.Resampling.BILINEAR),
            dtype=np.uint8,
        )
    canvas = np.empty((plan.padded_height, plan.padded_width, 3), dtype=np.uint8)
    canvas[:] = PAD_COLOR
    canvas[:plan.scaled_height, :plan.scaled_width] = scaled

    tiles = [
        canvas[r * TILE_EDGE:(r + 1) * TILE_EDGE, c * TILE_EDGE:(c + 1) * TILE_EDGE].copy()
        for r in range(plan.grid_rows)
        for c in range(plan.grid_cols)
    ]
    thumbnail = None
    if plan.include_thumbnail:
        thumbnail = np.asarray(
            Image.fromarray(image).resize((TILE_EDGE, TILE_EDGE), Image.Resampling.BILINEAR), dtype=np.uint8,
        )
    return TileSequence(plan=plan, thumbnail=thumbnail, tiles=tiles)


def serialize_placeholders(sizes: list[tuple[int, int]]) -> list[str]:
    """多图请求的占位序列：每张图 token_count 个图像占位，图与图之间一个换行标记"""
    seq: list[str] = []
    for i, (w, h) in enumerate(sizes):
        if i:
            seq.append(NEWLINE_TOKEN)
        seq.extend([IMAGE_TOKEN] * token_count(w, h))
    return seq


def request_token_plan(sizes: list[tuple[int, int]]) -> dict[str, object]:
    per_image = [token_count(w, h) for w, h in sizes]
    markers = max(0, len(sizes) - 1)
    return {"per_image": per_image, "newline_markers": markers, "total": sum(per_image) + markers}
